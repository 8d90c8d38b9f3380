"""Training configuration shared by the GP-based imputers."""

from dataclasses import dataclass, field, asdict

# Iteration budget drops to the small-data profile below this many training rows.
SMALL_DATA_ROWS = 2000
SMALL_DATA_ITERATIONS = 2000


@dataclass
class TrainConfig:
    """Optimization settings; defaults match the benchmark protocol."""

    num_inducing: int = 100
    batch_size: int = 100
    learning_rate: float = 0.01
    iterations: int = 10_000
    num_samples: int = 20
    seed: int = 0
    dgp_layers: int = 5
    log_every: int = 100
    auto_small_profile: bool = True

    def resolved_iterations(self, n_train):
        if self.auto_small_profile and n_train < SMALL_DATA_ROWS:
            return min(self.iterations, SMALL_DATA_ITERATIONS)
        return self.iterations

    def to_dict(self):
        return asdict(self)
