# MIT License
#
# Copyright (c) 2025 David C Ellis
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in all
# copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

import numpy as np

from ducktools.fedgaf.neuralkit import (
    conv2d_backward,
    conv2d_forward,
    finite_difference,
    max_relative_error,
)

rng = np.random.default_rng(0)
x = rng.normal(size=(2, 3, 8, 8))
w = rng.normal(size=(4, 3, 5, 5))
b = rng.normal(size=4)

out, cache = conv2d_forward(x, w, b)
upstream = rng.normal(size=out.shape)
dx, dw, db = conv2d_backward(upstream, cache)


def weighted_output(kernels):
    return float(np.sum(conv2d_forward(x, kernels, b)[0] * upstream))


numeric = finite_difference(weighted_output, w)
print(f"Max relative error in dw: {max_relative_error(dw, numeric):.2e}")
