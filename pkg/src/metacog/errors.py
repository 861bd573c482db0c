"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A linear-algebra or integration step failed numerically."""


class RankDeficientError(NumericalError):
    """Least-squares regressor matrix lacks full column rank."""

    def __init__(self, rank: int, n_rows: int, n_cols: int, cond: float = float("inf")):
        super().__init__(
            f"regressor matrix has numerical rank {rank} < {n_cols} unknowns "
            f"with N = {n_rows} intervals (condition number {cond:.3g})"
        )
        self.rank = rank
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.cond = cond


class SimulationDiverged(NumericalError):
    """State norm exceeded the blow-up bound."""

    def __init__(self, t: float, norm: float):
        super().__init__(f"state norm {norm:.3g} exceeded the blow-up bound at t = {t:.6g}")
        self.t = t


class ConfigError(ValueError):
    """Invalid run configuration; the message names the key path."""
