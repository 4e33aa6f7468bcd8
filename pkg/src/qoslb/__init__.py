"""QoS-aware multi-band RAN load balancing with a graph dueling Q-network."""

__version__ = "0.1.0"

from .agent import GRLBalancer  # noqa: E402
from .baselines import MaxRSRPBalancer, MaxSINRBalancer  # noqa: E402
from .config import ScenarioConfig, TrainConfig, parse_config  # noqa: E402

__all__ = ["GRLBalancer", "MaxRSRPBalancer", "MaxSINRBalancer", "ScenarioConfig",
           "TrainConfig", "parse_config", "__version__"]
