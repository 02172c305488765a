"""Writes the GeoTIFF reader fixtures with tifffile (an independent encoder).

Pixel (x, y, band) of the 8-bit images holds (3*x + 5*y + 70*band) % 256; the float images hold
x - 0.25*y + 1000*band. Georeference: origin (500000, 8000000), 0.5 m pixels, EPSG:32736.
"""
import numpy as np
import tifffile

W, H = 70, 45
y, x = np.mgrid[0:H, 0:W]
u8 = np.stack([(3 * x + 5 * y + 70 * b) % 256 for b in range(3)], axis=-1).astype(np.uint8)
f32 = np.stack([x - 0.25 * y + 1000.0 * b for b in range(2)], axis=-1).astype(np.float32)

geo = [
    (33550, 12, 3, (0.5, 0.5, 0.0), True),                         # ModelPixelScale
    (33922, 12, 6, (0.0, 0.0, 0.0, 500000.0, 8000000.0, 0.0), True),  # ModelTiepoint
    (34735, 3, 8, (1, 1, 0, 1, 3072, 0, 1, 32736), True),          # GeoKeyDirectory: ProjectedCSType
]

def write(name, data, **kw):
    tifffile.imwrite(name, data, extratags=geo, photometric="rgb" if data.dtype == np.uint8 else "minisblack", **kw)

write("u8_strip_none.tif", u8, rowsperstrip=7)
write("u8_strip_lzw_pred2.tif", u8, rowsperstrip=10, compression="lzw", predictor=2)
write("u8_tiled_deflate.tif", u8, tile=(16, 32), compression="zlib")
write("u8_planar_lzw.tif", np.moveaxis(u8, -1, 0), planarconfig="separate", rowsperstrip=8, compression="lzw")
write("u8_bigtiff_deflate.tif", u8, bigtiff=True, rowsperstrip=9, compression="zlib", predictor=2)
write("f32_strip_deflate_pred3.tif", f32, rowsperstrip=6, compression="zlib", predictor=3, planarconfig="contig")
write("f32_tiled_lzw.tif", f32, tile=(16, 16), compression="lzw", planarconfig="contig")
