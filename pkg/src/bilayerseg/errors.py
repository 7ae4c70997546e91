"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI prints as
``ERROR <code>: <message>``.
"""


class BilayerError(Exception):
    code = "error"


class DimensionError(BilayerError, ValueError):
    code = "dimension"


class ConfigurationError(BilayerError, ValueError):
    code = "config"


class DomainError(BilayerError, ValueError):
    code = "domain"


class ContractError(BilayerError, RuntimeError):
    code = "contract"


class AnnotationLookupError(BilayerError, KeyError):
    code = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FeasibilityError(BilayerError, RuntimeError):
    code = "infeasible"


class GenerationError(BilayerError, RuntimeError):
    code = "generation"


class TrainingError(BilayerError, RuntimeError):
    code = "training"

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
