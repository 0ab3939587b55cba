"""Random-forest regression of kernel runtimes."""

from .model import (DegenerateResponseError, Forest, ForestParams, ModelFormatError,
                    OobCache, OobCurve, SchemaMismatchError, fit, fit_arrays, oob_error,
                    oob_predictions,
                    oob_statistics, schema_fingerprint)

__all__ = [
    "DegenerateResponseError", "Forest", "ForestParams", "ModelFormatError", "OobCache",
    "OobCurve", "SchemaMismatchError", "fit", "fit_arrays", "oob_error", "oob_predictions", "oob_statistics",
    "schema_fingerprint",
]
