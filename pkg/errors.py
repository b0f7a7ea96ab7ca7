"""
Error types for the MHG-GNN pipeline
Library code raises these; the CLI maps DataError/ComputeError to exit code 2
"""


class MhgError(Exception):
    """Base class for every error raised by this project"""


class DataError(MhgError):
    """Bad or unsupported input data"""


class ComputeError(MhgError):
    """Numerical or shape failure inside the model"""


# molgraph
class SmilesSyntaxError(DataError):
    pass


class UnsupportedFeature(DataError):
    pass


class DisconnectedInput(DataError):
    pass


class UnsupportedElement(DataError):
    pass


class InvalidMolecule(DataError):
    pass


# hypergraph
class InvalidHypergraph(DataError):
    pass


class NonterminalRemaining(DataError):
    pass


class EmptyInput(DataError):
    pass


# grammar
class EmptyCorpus(DataError):
    pass


class NoMatch(DataError):
    pass


class EmptyFrontier(DataError):
    pass


class IncompleteDerivation(DataError):
    pass


class ParseError(DataError):
    pass


class GrammarFormatError(DataError):
    pass


# model / training
class InvalidTarget(DataError):
    pass


class UnparseableCorpus(DataError):
    def __init__(self, message: str, indices=None):
        super().__init__(message)
        self.indices = list(indices or [])


class CheckpointError(DataError):
    pass


class ConfigError(DataError):
    pass


# downstream
class DatasetTooSmall(DataError):
    pass


class ConstantTarget(DataError):
    pass


class DegenerateDesign(DataError):
    pass


# numerical
class ShapeMismatch(ComputeError):
    pass


class MaskAllFalse(ComputeError):
    pass


class BatchNormError(ComputeError):
    pass


class NonFiniteLoss(ComputeError):
    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
