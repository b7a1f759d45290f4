"""Pure numpy implementations of the row gather / scatter-add kernels."""

import numpy as np


def scatter_add_rows(values, index, n_rows):
    values = np.ascontiguousarray(values)
    if index.shape[0] != values.shape[0]:
        raise ValueError("index length does not match number of value rows")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError("scatter index out of range")
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    # np.add.at accumulates in index order, matching the compiled kernel bit for bit
    np.add.at(out, index, values)
    return out


def gather_rows(x, index):
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather index out of range")
    return np.ascontiguousarray(x[index])
