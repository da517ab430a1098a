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


"""
Federated ECG beat classification over Gramian Angular Field images.

The pipeline runs WFDB records through beat extraction (``ingest``), image
encoding (``gaf``), a small numpy CNN (``neuralkit``) and round based
federated averaging (``fedcore``) over a framed wire protocol (``transport``).
"""
try:
    from ._version import __version__, __version_tuple__
except ImportError:  # pragma: no cover
    # Source tree without a setuptools-scm build
    __version__ = "0.1.0"
    __version_tuple__ = (0, 1, 0)

from .exceptions import (
    FedGafError,
    AggregationError,
    ChannelClosed,
    ClientAbortError,
    ConfigError,
    DeserializeError,
    EncodeError,
    ParseError,
    ProtocolError,
    ReportIOError,
    RoundAbortError,
    SerializeError,
    ShapeError,
)
