"""Regenerate the stored fixtures in this directory.

    python3 tests/fixtures/make_fixtures.py
"""
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent

# Image pair whose MSE puts PSNR at 30.04 dB: b = a +/- sqrt(mse) per channel
# value, with a kept away from 0 and 1 so nothing clips.
rng = np.random.default_rng(3004)
a = rng.uniform(0.1, 0.9, (64, 64, 3))
step = np.sqrt(10.0 ** (-30.04 / 10.0))
b = a + step * rng.choice([-1.0, 1.0], size=a.shape)
np.savez_compressed(HERE / "psnr_30_04_pair.npz", a=a, b=b)

# Multi-node training minutes and quality for the Richtmyer-Meshkov 2048^2 runs.
(HERE / "rm_2048_scaling.csv").write_text(
    "config,wall_minutes,psnr,ssim\n"
    "4 nodes,32.03,30.04,0.97\n"
    "8 nodes,10.18,30.04,0.97\n"
)
