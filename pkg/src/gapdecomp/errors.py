"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so the CLI can emit
a JSON error document without string matching.
"""


class DecompositionError(Exception):
    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"error": self.code, "message": str(self)}
        out.update(self.details)
        return out


# data ingestion

class UnknownColumn(DecompositionError):
    code = "unknown_column"


class NonNumericValue(DecompositionError):
    code = "non_numeric_value"


class FewerThanTwoGroups(DecompositionError):
    code = "fewer_than_two_groups"


class MoreThanTwoGroups(DecompositionError):
    code = "more_than_two_groups"


class EmptyGroup(DecompositionError):
    code = "empty_group"


class EmptyInput(DecompositionError):
    code = "empty_input"


class LengthMismatch(DecompositionError):
    code = "length_mismatch"


class DegenerateOutcome(DecompositionError):
    code = "degenerate_outcome"


# support

class StrategyMismatch(DecompositionError):
    code = "strategy_mismatch"


# distribution regression

class RankDeficientDesign(DecompositionError):
    code = "rank_deficient_design"


class NonConformableCovariates(DecompositionError):
    code = "non_conformable_covariates"


class SolverDivergence(UserWarning):
    """Warning: a threshold fit did not reach the gradient tolerance."""


# decomposition

class EmptySelector(DecompositionError):
    code = "empty_selector"


class GridMismatch(DecompositionError):
    code = "grid_mismatch"


class EmptyCommonSupport(DecompositionError):
    code = "empty_common_support"


class WrongMode(DecompositionError):
    code = "wrong_mode"


class PropensityOverflow(UserWarning):
    """Warning: some reweighting factors were capped."""


# synthetic data

class InvalidSpec(DecompositionError):
    code = "invalid_spec"


class NotDiscrete(DecompositionError):
    code = "not_discrete"


class InvalidConfig(DecompositionError):
    code = "invalid_config"
