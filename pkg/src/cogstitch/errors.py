class CogError(Exception):
    pass


class ContractError(CogError):
    pass


class DimensionError(ContractError):
    pass


class NumericalError(CogError):
    pass


class ConfigError(CogError):
    pass


class DatasetError(CogError):
    pass


class CheckpointError(CogError):
    pass


class NotRegistered(CogError):
    pass


class AlreadyRegistered(CogError):
    pass


class TrainingError(CogError):
    def __init__(self, message: str, diagnostic: dict[str, float] | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}

    def __str__(self) -> str:
        if not self.diagnostic:
            return super().__str__()
        details = ", ".join(f"{k}={v:.6g}" for k, v in sorted(self.diagnostic.items()))
        return f"{super().__str__()} ({details})"


class DivergenceError(TrainingError):
    def __init__(self, step: int, mean_abs_q: float, threshold: float) -> None:
        super().__init__(
            "Q-function diverged",
            {"step": float(step), "mean_abs_q": mean_abs_q, "threshold": threshold},
        )
        self.step = step
        self.mean_abs_q = mean_abs_q
        self.threshold = threshold
