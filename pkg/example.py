import logging

from response_trajectories.inference.diagnostics import summarize
from response_trajectories.inference.nuts import SamplerConfig, nuts_sample
from response_trajectories.inference.params import ParamVector
from response_trajectories.metrics import evaluate_fit
from response_trajectories.model import ModelSpec, ModelVariant, TrajectoryPosterior
from response_trajectories.simulate import SimConfig, simulate_toy
from response_trajectories.trajectory import posterior_trajectories, trajectory_frame

# Enable info logging
logging.getLogger().setLevel(logging.INFO)
logging.getLogger("response_trajectories").setLevel(logging.INFO)

# Simulate three patients whose meal reports carry additive errors
data, truth = simulate_toy(SimConfig(n_patients=3, meals_per_patient=10, seed=7))

# Fit the errors-in-variables model to the training days
spec = ModelSpec(variant=ModelVariant.HIER_TIME_COV, inducing_count=12)
posterior = TrajectoryPosterior([patient.training() for patient in data], spec)
init = ParamVector(posterior.initial_point(), posterior.layout)
draws = nuts_sample(posterior, SamplerConfig(chains=2, warmup=300, draws=300, seed=1), init)
print(summarize(draws).head(10))

# Trajectories at every observation time, test days included
trajectories = posterior_trajectories(draws, data, spec)
print(trajectory_frame(trajectories, split="test").head())
print(evaluate_fit(trajectories).table_row())
