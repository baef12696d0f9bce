"""
Compressing tiles with the 2D DCT
=================================

A smooth raster keeps almost all of its energy in a handful of low
frequencies. This script compresses a synthetic tile to its top-left 8x8
coefficients, compares that against a row-major 1D budget of the same
size, and checks that flips and rotations can be done on the coefficients.
"""

import numpy as np

from tilefreq.codec import (
    aug_rot90,
    dct2d,
    lowpass1d_rowmajor,
    lowpass2d,
    mse,
    reconstruct,
    reconstruct1d_rowmajor,
)
from tilefreq.data import SynthConfig, synth_generate

ds = synth_generate(SynthConfig(numSites=5, tileSize=128, channels=1, seed=4))
tile = ds.tiles[next(iter(ds.tiles))]

# 128 x 128 pixels become 64 numbers
block = lowpass2d(tile, k=8)
print("block shape", block.coeffs.shape)

energy = np.sum(dct2d(tile[0]) ** 2)
print("energy kept  %.4f" % (np.sum(block.coeffs**2) / energy))

# same budget, but flattening the tile first mixes rows together
flat = lowpass1d_rowmajor(tile, n=64)
print("2D low-pass MSE  %.2e" % mse(reconstruct(block), tile))
print("1D row-major MSE %.2e" % mse(reconstruct1d_rowmajor(flat, tile.shape), tile))

# a quarter turn in pixel space is a transpose plus sign flips here
turned = lowpass2d(np.rot90(tile, axes=(1, 2)), 8)
print("rot90 mismatch %.1e" % np.max(np.abs(aug_rot90(block).coeffs - turned.coeffs)))
