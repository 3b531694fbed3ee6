"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` used by the command-line front end:
2 for bad input, 3 for solver failures, 4 for invalid configuration.
"""


class ScemdError(Exception):
    exit_code = 2
    code = "error"


class InputError(ScemdError, ValueError):
    exit_code = 2
    code = "bad-input"


class ConfigError(ScemdError, ValueError):
    exit_code = 4
    code = "bad-config"


class SolverFailure(ScemdError, RuntimeError):
    exit_code = 3
    code = "solver"


class MalformedProblem(InputError):
    code = "malformed-lp"


class DimensionMismatch(InputError):
    code = "dimension"


class InvalidHistogram(InputError):
    code = "histogram"


class EmptyPrototypes(InputError):
    code = "empty-prototypes"


class TooFewInstances(InputError):
    code = "too-few-instances"


class TooFewSamples(InputError):
    code = "too-few-samples"


class BadK(ConfigError):
    code = "bad-k"


class BadSpec(ConfigError):
    code = "bad-spec"


class InfeasibleTransport(SolverFailure):
    code = "infeasible-transport"


class InfeasibleUpdate(SolverFailure):
    code = "infeasible-update"


class SingularSystem(SolverFailure):
    code = "singular"


class NoPositives(InputError):
    code = "no-positives"


class NoNegatives(InputError):
    code = "no-negatives"
