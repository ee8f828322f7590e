# -*- coding: utf-8 -*-
# ------------------------------------------------------------------------------
#
#   Copyright 2024 Valory AG
#
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.
#
# ------------------------------------------------------------------------------

"""This module contains the exceptions raised by the weight normalization library."""


class WeightNormLabError(Exception):
    """Base exception of the library."""


class DimensionError(WeightNormLabError, ValueError):
    """Raised when tensor shapes do not agree."""


class DegenerateDirectionError(WeightNormLabError, ValueError):
    """Raised when a direction vector has (numerically) zero norm."""


class InvalidScaleError(WeightNormLabError, ValueError):
    """Raised when a log-scale parameterization meets a non-positive scale."""


class ContractViolationError(WeightNormLabError):
    """Raised when an operation is called outside of its contract."""


class BatchSizeError(WeightNormLabError, ValueError):
    """Raised when a minibatch is too small for the requested statistics."""


class SampleSizeError(WeightNormLabError, ValueError):
    """Raised when too few samples are given to estimate a covariance."""


class UndefinedAlignmentError(WeightNormLabError, ValueError):
    """Raised when an alignment is requested against a zero covariance."""


class BuildError(WeightNormLabError, ValueError):
    """Raised when layer specifications do not compose."""


class ConfigError(WeightNormLabError, ValueError):
    """Raised on invalid experiment configuration."""


class DataError(WeightNormLabError, ValueError):
    """Base class of dataset errors."""


class DataFormatError(DataError):
    """Raised when a data file has a wrong magic number or layout."""


class DataConsistencyError(DataError):
    """Raised when paired data files disagree."""


class DataLengthError(DataError):
    """Raised when a data file is truncated."""


class DivergenceError(WeightNormLabError):
    """Raised when training produces non-finite values."""
