"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PromptQAError(Exception):
    exit_code = 1


class ConfigError(PromptQAError, ValueError):
    exit_code = 2


class ShapeError(PromptQAError, ValueError):
    exit_code = 2


class StateError(PromptQAError, RuntimeError):
    exit_code = 2


class InputError(PromptQAError, ValueError):
    exit_code = 3


class VocabError(InputError):
    pass


class ManifestError(InputError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class DataFormatError(InputError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(PromptQAError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, message, step=None, batch=None):
        super().__init__(f"{message} (step={step}, batch={batch})")
        self.step = step
        self.batch = batch
