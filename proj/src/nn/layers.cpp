#include "popgrid/nn/layers.hpp"

#include "popgrid/common.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace popgrid::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMatrix>;
using ConstMapRow = Eigen::Map<const RowMatrix>;

}  // namespace

Param::Param(std::string n, std::vector<int> s, bool train) : name(std::move(n)), shape(std::move(s)), trainable(train) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, 0.0);
    grad.assign(count, 0.0);
}

void Param::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream ss;
    ss << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
    ss << ']';
    return ss.str();
}

Conv2d::Conv2d(std::string name, int in, int out, int kernel, int stride, int padding, bool bias)
    : in_(in), out_(out), kernel_(kernel), stride_(stride), padding_(padding), has_bias_(bias),
      weight_(name + ".weight", {out, in, kernel, kernel}), bias_(name + ".bias", {out}) {
    if (in <= 0 || out <= 0 || kernel <= 0 || stride <= 0 || padding < 0) {
        throw Error("conv '" + name + "': invalid geometry");
    }
}

Tensor Conv2d::forward(const Tensor& x, ForwardContext&) {
    if (x.c != in_) {
        throw Error("conv '" + weight_.name + "': expected " + std::to_string(in_) + " input channels, got " +
                    std::to_string(x.c));
    }
    in_h_ = x.h;
    in_w_ = x.w;
    out_h_ = (x.h + 2 * padding_ - kernel_) / stride_ + 1;
    out_w_ = (x.w + 2 * padding_ - kernel_) / stride_ + 1;
    if (out_h_ <= 0 || out_w_ <= 0) throw Error("conv '" + weight_.name + "': input too small");
    const std::size_t K = static_cast<std::size_t>(in_) * kernel_ * kernel_;
    const std::size_t P = static_cast<std::size_t>(out_h_) * out_w_;

    if (pointwise()) {
        cols_ = x.data;
    } else {
        cols_.assign(K * P, 0.0);
        std::size_t row = 0;
        for (int ic = 0; ic < in_; ++ic) {
            for (int ky = 0; ky < kernel_; ++ky) {
                for (int kx = 0; kx < kernel_; ++kx, ++row) {
                    double* dst = cols_.data() + row * P;
                    for (int oy = 0; oy < out_h_; ++oy) {
                        const int iy = oy * stride_ - padding_ + ky;
                        if (iy < 0 || iy >= x.h) continue;
                        const double* src = x.data.data() + (static_cast<std::size_t>(ic) * x.h + iy) * x.w;
                        double* drow = dst + static_cast<std::size_t>(oy) * out_w_;
                        for (int ox = 0; ox < out_w_; ++ox) {
                            const int ix = ox * stride_ - padding_ + kx;
                            if (ix >= 0 && ix < x.w) drow[ox] = src[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor y(out_, out_h_, out_w_);
    ConstMapRow W(weight_.value.data(), out_, static_cast<Eigen::Index>(K));
    ConstMapRow C(cols_.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    MapRow Y(y.data.data(), out_, static_cast<Eigen::Index>(P));
    Y.noalias() = W * C;
    if (has_bias_) {
        for (int o = 0; o < out_; ++o) Y.row(o).array() += bias_.value[o];
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& grad) {
    const std::size_t K = static_cast<std::size_t>(in_) * kernel_ * kernel_;
    const std::size_t P = static_cast<std::size_t>(out_h_) * out_w_;
    ConstMapRow dY(grad.data.data(), out_, static_cast<Eigen::Index>(P));
    ConstMapRow C(cols_.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    MapRow dW(weight_.grad.data(), out_, static_cast<Eigen::Index>(K));
    dW.noalias() += dY * C.transpose();
    if (has_bias_) {
        for (int o = 0; o < out_; ++o) bias_.grad[o] += dY.row(o).sum();
    }
    ConstMapRow W(weight_.value.data(), out_, static_cast<Eigen::Index>(K));
    RowMatrix dC = W.transpose() * dY;

    Tensor dx(in_, in_h_, in_w_);
    if (pointwise()) {
        std::copy(dC.data(), dC.data() + dC.size(), dx.data.begin());
        return dx;
    }
    std::size_t row = 0;
    for (int ic = 0; ic < in_; ++ic) {
        for (int ky = 0; ky < kernel_; ++ky) {
            for (int kx = 0; kx < kernel_; ++kx, ++row) {
                const double* src = dC.data() + row * P;
                for (int oy = 0; oy < out_h_; ++oy) {
                    const int iy = oy * stride_ - padding_ + ky;
                    if (iy < 0 || iy >= in_h_) continue;
                    double* dst = dx.data.data() + (static_cast<std::size_t>(ic) * in_h_ + iy) * in_w_;
                    const double* srow = src + static_cast<std::size_t>(oy) * out_w_;
                    for (int ox = 0; ox < out_w_; ++ox) {
                        const int ix = ox * stride_ - padding_ + kx;
                        if (ix >= 0 && ix < in_w_) dst[ix] += srow[ox];
                    }
                }
            }
        }
    }
    return dx;
}

void Conv2d::parameters(std::vector<Param*>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
}

BatchNorm::BatchNorm(std::string name, int channels, double eps)
    : channels_(channels), eps_(eps), gamma_(name + ".weight", {channels}), beta_(name + ".bias", {channels}),
      mean_(name + ".running_mean", {channels}, false), var_(name + ".running_var", {channels}, false) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
    std::fill(var_.value.begin(), var_.value.end(), 1.0);
}

Tensor BatchNorm::forward(const Tensor& x, ForwardContext&) {
    if (x.c != channels_) throw Error("batchnorm '" + gamma_.name + "': channel mismatch");
    xhat_ = Tensor(x.c, x.h, x.w);
    Tensor y(x.c, x.h, x.w);
    const std::size_t plane = x.plane();
    for (int c = 0; c < channels_; ++c) {
        const double inv = 1.0 / std::sqrt(var_.value[c] + eps_);
        for (std::size_t i = 0; i < plane; ++i) {
            const double xh = (x.data[c * plane + i] - mean_.value[c]) * inv;
            xhat_.data[c * plane + i] = xh;
            y.data[c * plane + i] = gamma_.value[c] * xh + beta_.value[c];
        }
    }
    return y;
}

Tensor BatchNorm::backward(const Tensor& grad) {
    Tensor dx(grad.c, grad.h, grad.w);
    const std::size_t plane = grad.plane();
    for (int c = 0; c < channels_; ++c) {
        const double scale = gamma_.value[c] / std::sqrt(var_.value[c] + eps_);
        double dg = 0, db = 0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double g = grad.data[c * plane + i];
            dg += g * xhat_.data[c * plane + i];
            db += g;
            dx.data[c * plane + i] = g * scale;
        }
        gamma_.grad[c] += dg;
        beta_.grad[c] += db;
    }
    return dx;
}

void BatchNorm::parameters(std::vector<Param*>& out) {
    out.insert(out.end(), {&gamma_, &beta_, &mean_, &var_});
}

Tensor ReLU::forward(const Tensor& x, ForwardContext&) {
    Tensor y = x;
    active_.assign(x.size(), false);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y.data[i] > 0) {
            active_[i] = true;
        } else {
            y.data[i] = 0;
        }
    }
    return y;
}

Tensor ReLU::backward(const Tensor& grad) {
    Tensor dx = grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        if (!active_[i]) dx.data[i] = 0;
    }
    return dx;
}

MaxPool::MaxPool(int kernel, int stride, int padding) : kernel_(kernel), stride_(stride), padding_(padding) {
    if (kernel <= 0 || stride <= 0 || padding < 0) throw Error("maxpool: invalid geometry");
}

Tensor MaxPool::forward(const Tensor& x, ForwardContext&) {
    in_c_ = x.c;
    in_h_ = x.h;
    in_w_ = x.w;
    const int oh = (x.h + 2 * padding_ - kernel_) / stride_ + 1;
    const int ow = (x.w + 2 * padding_ - kernel_) / stride_ + 1;
    Tensor y(x.c, oh, ow);
    argmax_.assign(y.size(), 0);
    for (int c = 0; c < x.c; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t arg = 0;
                for (int ky = 0; ky < kernel_; ++ky) {
                    const int iy = oy * stride_ - padding_ + ky;
                    if (iy < 0 || iy >= x.h) continue;
                    for (int kx = 0; kx < kernel_; ++kx) {
                        const int ix = ox * stride_ - padding_ + kx;
                        if (ix < 0 || ix >= x.w) continue;
                        const std::size_t idx = (static_cast<std::size_t>(c) * x.h + iy) * x.w + ix;
                        if (x.data[idx] > best) {
                            best = x.data[idx];
                            arg = idx;
                        }
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(c) * oh + oy) * ow + ox;
                y.data[o] = best;
                argmax_[o] = arg;
            }
        }
    }
    return y;
}

Tensor MaxPool::backward(const Tensor& grad) {
    Tensor dx(in_c_, in_h_, in_w_);
    for (std::size_t o = 0; o < grad.size(); ++o) dx.data[argmax_[o]] += grad.data[o];
    return dx;
}

AvgPool::AvgPool(int kernel, int stride) : kernel_(kernel), stride_(stride) {
    if (kernel <= 0 || stride <= 0) throw Error("avgpool: invalid geometry");
}

Tensor AvgPool::forward(const Tensor& x, ForwardContext&) {
    in_c_ = x.c;
    in_h_ = x.h;
    in_w_ = x.w;
    const int oh = (x.h - kernel_) / stride_ + 1;
    const int ow = (x.w - kernel_) / stride_ + 1;
    if (oh <= 0 || ow <= 0) throw Error("avgpool: input smaller than kernel");
    Tensor y(x.c, oh, ow);
    const double norm = 1.0 / (kernel_ * kernel_);
    for (int c = 0; c < x.c; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0;
                for (int ky = 0; ky < kernel_; ++ky)
                    for (int kx = 0; kx < kernel_; ++kx) s += x.at(c, oy * stride_ + ky, ox * stride_ + kx);
                y.at(c, oy, ox) = s * norm;
            }
        }
    }
    return y;
}

Tensor AvgPool::backward(const Tensor& grad) {
    Tensor dx(in_c_, in_h_, in_w_);
    const double norm = 1.0 / (kernel_ * kernel_);
    for (int c = 0; c < grad.c; ++c) {
        for (int oy = 0; oy < grad.h; ++oy) {
            for (int ox = 0; ox < grad.w; ++ox) {
                const double g = grad.at(c, oy, ox) * norm;
                for (int ky = 0; ky < kernel_; ++ky)
                    for (int kx = 0; kx < kernel_; ++kx) dx.at(c, oy * stride_ + ky, ox * stride_ + kx) += g;
            }
        }
    }
    return dx;
}

Tensor Dropout::forward(const Tensor& x, ForwardContext& ctx) {
    if (ctx.rng == nullptr || p_ <= 0.0) {
        mask_.clear();
        return x;
    }
    std::bernoulli_distribution keep(1.0 - p_);
    const double scale = 1.0 / (1.0 - p_);
    mask_.resize(x.size());
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) {
        mask_[i] = keep(*ctx.rng) ? scale : 0.0;
        y.data[i] *= mask_[i];
    }
    return y;
}

Tensor Dropout::backward(const Tensor& grad) {
    if (mask_.empty()) return grad;
    Tensor dx = grad;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= mask_[i];
    return dx;
}

Sequential::Sequential(const Sequential& other) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
    if (this != &other) {
        Sequential tmp(other);
        layers_ = std::move(tmp.layers_);
    }
    return *this;
}

Tensor Sequential::forward(const Tensor& x, ForwardContext& ctx) {
    if (layers_.empty()) return x;
    Tensor cur = layers_.front()->forward(x, ctx);
    for (std::size_t i = 1; i < layers_.size(); ++i) cur = layers_[i]->forward(cur, ctx);
    return cur;
}

Tensor Sequential::backward(const Tensor& grad) {
    if (layers_.empty()) return grad;
    Tensor cur = layers_.back()->backward(grad);
    for (std::size_t i = layers_.size() - 1; i-- > 0;) cur = layers_[i]->backward(cur);
    return cur;
}

void Sequential::parameters(std::vector<Param*>& out) {
    for (auto& l : layers_) l->parameters(out);
}

int Sequential::conv_count() const {
    int n = 0;
    for (const auto& l : layers_) n += l->conv_count();
    return n;
}

int Sequential::output_channels(int input_channels) const {
    int c = input_channels;
    for (const auto& l : layers_) c = l->output_channels(c);
    return c;
}

Residual::Residual(Sequential main, Sequential shortcut, int out_channels)
    : main_(std::move(main)), shortcut_(std::move(shortcut)), out_channels_(out_channels) {}

Tensor Residual::forward(const Tensor& x, ForwardContext& ctx) {
    Tensor m = main_.forward(x, ctx);
    const Tensor s = shortcut_.empty() ? x : shortcut_.forward(x, ctx);
    if (!m.same_shape(s)) throw Error("residual block: main and shortcut shapes differ");
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] += s.data[i];
    return relu_.forward(m, ctx);
}

Tensor Residual::backward(const Tensor& grad) {
    const Tensor g = relu_.backward(grad);
    Tensor dx = main_.backward(g);
    const Tensor ds = shortcut_.empty() ? g : shortcut_.backward(g);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += ds.data[i];
    return dx;
}

void Residual::parameters(std::vector<Param*>& out) {
    main_.parameters(out);
    shortcut_.parameters(out);
}

namespace {

Sequential projection(const std::string& name, int in, int out, int stride) {
    Sequential s;
    if (stride != 1 || in != out) {
        s.add(std::make_unique<Conv2d>(name + ".downsample.0", in, out, 1, stride, 0, false));
        s.add(std::make_unique<BatchNorm>(name + ".downsample.1", out));
    }
    return s;
}

}  // namespace

LayerPtr make_basic_block(const std::string& name, int in, int out, int stride) {
    Sequential main;
    main.add(std::make_unique<Conv2d>(name + ".conv1", in, out, 3, stride, 1, false));
    main.add(std::make_unique<BatchNorm>(name + ".bn1", out));
    main.add(std::make_unique<ReLU>());
    main.add(std::make_unique<Conv2d>(name + ".conv2", out, out, 3, 1, 1, false));
    main.add(std::make_unique<BatchNorm>(name + ".bn2", out));
    return std::make_unique<Residual>(std::move(main), projection(name, in, out, stride), out);
}

LayerPtr make_bottleneck(const std::string& name, int in, int width, int stride, int expansion) {
    const int out = width * expansion;
    Sequential main;
    main.add(std::make_unique<Conv2d>(name + ".conv1", in, width, 1, 1, 0, false));
    main.add(std::make_unique<BatchNorm>(name + ".bn1", width));
    main.add(std::make_unique<ReLU>());
    main.add(std::make_unique<Conv2d>(name + ".conv2", width, width, 3, stride, 1, false));
    main.add(std::make_unique<BatchNorm>(name + ".bn2", width));
    main.add(std::make_unique<ReLU>());
    main.add(std::make_unique<Conv2d>(name + ".conv3", width, out, 1, 1, 0, false));
    main.add(std::make_unique<BatchNorm>(name + ".bn3", out));
    return std::make_unique<Residual>(std::move(main), projection(name, in, out, stride), out);
}

}  // namespace popgrid::nn
