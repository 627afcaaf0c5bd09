"""Exception types raised across sparselab."""


class SparselabError(Exception):
    """Base class for all library errors."""


class ContractViolation(SparselabError, ValueError):
    """An operation was called with arguments outside its contract."""


class IndexBuildError(SparselabError):
    pass


class FormatError(SparselabError):
    """A persisted file is corrupt, truncated or of an unexpected version."""


class TrainingDiverged(SparselabError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
