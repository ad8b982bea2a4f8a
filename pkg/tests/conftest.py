import torch
from hypothesis import HealthCheck, settings

# single-core determinism; the suite trains small models on CPU
torch.set_num_threads(1)

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")
