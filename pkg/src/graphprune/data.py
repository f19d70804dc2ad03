"""Synthetic image-classification task for desk-scale pruning experiments.

Three stripe-orientation classes (horizontal, vertical, diagonal) on small
RGB images, with random phase, per-channel gain, and Gaussian noise.  The
train/validation split mirrors a 15K/5K protocol at one tenth the size.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def num_classes(self):
        return int(max(self.train_y.max(), self.val_y.max())) + 1


def make_dataset(seed=0, n=2000, hw=8, val_fraction=0.25, noise=0.5) -> Dataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=n)
    rows = np.arange(hw)[:, None] * np.ones((1, hw))
    cols = np.ones((hw, 1)) * np.arange(hw)[None, :]
    x = np.empty((n, 3, hw, hw))
    for i in range(n):
        phase = rng.integers(0, 2)
        if y[i] == 0:
            pattern = (rows + phase) % 2
        elif y[i] == 1:
            pattern = (cols + phase) % 2
        else:
            pattern = (rows + cols + phase) % 2
        pattern = 2.0 * pattern - 1.0
        gain = rng.uniform(0.6, 1.4, size=(3, 1, 1))
        x[i] = gain * pattern[None] + noise * rng.normal(size=(3, hw, hw))
    n_val = int(round(val_fraction * n))
    return Dataset(train_x=x[n_val:], train_y=y[n_val:],
                   val_x=x[:n_val], val_y=y[:n_val])
