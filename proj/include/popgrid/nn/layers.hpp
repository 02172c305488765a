#pragma once

#include "popgrid/nn/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace popgrid::nn {

/// A differentiable operator on one sample. Each forward caches what the following backward
/// needs, so forward/backward must alternate per sample.
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, ForwardContext& ctx) = 0;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the last forward input.
    virtual Tensor backward(const Tensor& grad) = 0;
    virtual void parameters(std::vector<Param*>&) {}
    virtual std::unique_ptr<Layer> clone() const = 0;
    /// Convolutions on the main path (projection shortcuts excluded).
    virtual int conv_count() const { return 0; }
    virtual int output_channels(int input_channels) const { return input_channels; }
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d : public Layer {
public:
    Conv2d(std::string name, int in, int out, int kernel, int stride, int padding, bool bias);
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    void parameters(std::vector<Param*>& out) override;
    LayerPtr clone() const override { return std::make_unique<Conv2d>(*this); }
    int conv_count() const override { return 1; }
    int output_channels(int) const override { return out_; }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

private:
    bool pointwise() const { return kernel_ == 1 && stride_ == 1 && padding_ == 0; }

    int in_, out_, kernel_, stride_, padding_;
    bool has_bias_;
    Param weight_, bias_;
    int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
    std::vector<double> cols_;  // im2col of the last input, (in*k*k) x (out_h*out_w) row-major
};

/// Affine normalisation with stored (frozen) statistics; only scale and shift are learned.
class BatchNorm : public Layer {
public:
    BatchNorm(std::string name, int channels, double eps = 1e-5);
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    void parameters(std::vector<Param*>& out) override;
    LayerPtr clone() const override { return std::make_unique<BatchNorm>(*this); }

private:
    int channels_;
    double eps_;
    Param gamma_, beta_, mean_, var_;
    Tensor xhat_;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    LayerPtr clone() const override { return std::make_unique<ReLU>(*this); }

private:
    std::vector<bool> active_;
};

class MaxPool : public Layer {
public:
    MaxPool(int kernel, int stride, int padding);
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    LayerPtr clone() const override { return std::make_unique<MaxPool>(*this); }

private:
    int kernel_, stride_, padding_;
    int in_c_ = 0, in_h_ = 0, in_w_ = 0;
    std::vector<std::size_t> argmax_;
};

class AvgPool : public Layer {
public:
    AvgPool(int kernel, int stride);
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    LayerPtr clone() const override { return std::make_unique<AvgPool>(*this); }

private:
    int kernel_, stride_;
    int in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

/// Inverted dropout; active only when the context carries an rng and p > 0.
class Dropout : public Layer {
public:
    explicit Dropout(double p) : p_(p) {}
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    LayerPtr clone() const override { return std::make_unique<Dropout>(*this); }
    double rate() const { return p_; }
    void set_rate(double p) { p_ = p; }

private:
    double p_;
    std::vector<double> mask_;
};

class Sequential : public Layer {
public:
    Sequential() = default;
    Sequential(const Sequential& other);
    Sequential& operator=(const Sequential& other);
    Sequential(Sequential&&) = default;
    Sequential& operator=(Sequential&&) = default;

    void add(LayerPtr layer) { layers_.push_back(std::move(layer)); }
    bool empty() const { return layers_.empty(); }
    std::size_t size() const { return layers_.size(); }
    Layer& at(std::size_t i) { return *layers_[i]; }

    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    void parameters(std::vector<Param*>& out) override;
    LayerPtr clone() const override { return std::make_unique<Sequential>(*this); }
    int conv_count() const override;
    int output_channels(int input_channels) const override;

private:
    std::vector<LayerPtr> layers_;
};

/// relu(main(x) + shortcut(x)); an empty shortcut is the identity.
class Residual : public Layer {
public:
    Residual(Sequential main, Sequential shortcut, int out_channels);
    Tensor forward(const Tensor& x, ForwardContext& ctx) override;
    Tensor backward(const Tensor& grad) override;
    void parameters(std::vector<Param*>& out) override;
    LayerPtr clone() const override { return std::make_unique<Residual>(*this); }
    int conv_count() const override { return main_.conv_count(); }
    int output_channels(int) const override { return out_channels_; }

private:
    Sequential main_;
    Sequential shortcut_;
    ReLU relu_;
    int out_channels_;
};

/// Two 3x3 convolutions (ResNet-18/34 style).
LayerPtr make_basic_block(const std::string& name, int in, int out, int stride);
/// 1x1 -> 3x3(stride) -> 1x1 expansion (ResNet-50 style, stride on the 3x3).
LayerPtr make_bottleneck(const std::string& name, int in, int width, int stride, int expansion);

}  // namespace popgrid::nn
