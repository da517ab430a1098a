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
Exception hierarchy shared by every part of the package.

Each module raises the narrowest error it can. Everything derives from
FedGafError so callers (and the command line) can catch the whole family.
"""


class FedGafError(Exception):
    pass


class ConfigError(FedGafError):
    pass


class ParseError(FedGafError):
    pass


class EncodeError(FedGafError):
    pass


class ShapeError(FedGafError):
    pass


class AggregationError(FedGafError):
    pass


class ProtocolError(FedGafError):
    pass


class SerializeError(FedGafError):
    pass


class DeserializeError(FedGafError):
    pass


class ChannelClosed(FedGafError):
    """
    Raised on any use of a channel after either end has closed it.
    """


class RoundAbortError(FedGafError):
    """
    The server could not complete a round because a client disconnected,
    timed out or sent an update for the wrong round.

    :param message: description naming the client
    :param client_id: the offending client, if known
    """
    def __init__(self, message, client_id=None):
        super().__init__(message)
        self.client_id = client_id
        # Partial RunReport covering the rounds finished before the abort
        self.report = None


class ClientAbortError(FedGafError):
    pass


class ReportIOError(FedGafError, OSError):
    pass
