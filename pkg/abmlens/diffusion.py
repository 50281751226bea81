"""Discrete-time variance-preserving diffusion over snapshot vectors.

The network predicts the injected noise ``eps_theta(y_t, t)``; the score is
``-eps_theta / sqrt(1 - alpha_bar_t)``. Everything runs in float64 on the
CPU so training and sampling are pure functions of their inputs and seed.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field
from torch import nn
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.optim.swa_utils import AveragedModel

from abmlens.helpers.artifacts import read_json, write_csv, write_json
from abmlens.input_guards import finite_matrix, finite_vector

logger = logging.getLogger(__name__)

DTYPE = torch.float64
EMBEDDING_DIM = 32
MAX_PERIOD = 10_000.0
STD_FLOOR = 1e-12
FD_STEP = 1e-5


class NoiseSchedule(BaseModel):
    n_steps: int = Field(ge=1)
    betas: List[float]
    alpha_bars: List[float]

    @classmethod
    def linear(cls, n_steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, n_steps)
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        alpha_bars = np.cumprod(1.0 - betas)
        return cls(n_steps=n_steps, betas=betas.tolist(), alpha_bars=alpha_bars.tolist())

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at step ``t`` in 1..n_steps; the t = 0 boundary is 1."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return self.alpha_bars[t - 1]

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"step t must lie in [1, {self.n_steps}], got {t}")


class TrainConfig(BaseModel):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    seed: int = Field(0, ge=0, lt=2**64)
    hidden_width: int = Field(128, ge=1)
    n_hidden: int = Field(3, ge=1)
    # Weights are replaced by their exponential moving average at the end; 0 keeps the last step.
    ema_decay: float = Field(0.995, ge=0.0, lt=1.0)
    # Cosine decay of the learning rate down to this fraction of it.
    final_lr_fraction: float = Field(0.01, ge=0.0, le=1.0)


class ScoreNetwork(nn.Module):
    """MLP over [y, sinusoidal(t)] with SiLU activations."""

    def __init__(self, input_dim: int, hidden_width: int, n_hidden: int, n_steps: int):
        super().__init__()
        self.n_steps = n_steps
        layers: List[nn.Module] = []
        width = input_dim + EMBEDDING_DIM
        for _ in range(n_hidden):
            layers += [nn.Linear(width, hidden_width, dtype=DTYPE), nn.SiLU()]
            width = hidden_width
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, input_dim, dtype=DTYPE)
        half = EMBEDDING_DIM // 2
        frequencies = torch.exp(-math.log(MAX_PERIOD) * torch.arange(half, dtype=DTYPE) / half)
        self.register_buffer("frequencies", frequencies)

    def embed(self, t: torch.Tensor) -> torch.Tensor:
        angles = t.to(DTYPE)[:, None] * self.frequencies
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    def forward(self, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(torch.cat([y, self.embed(t)], dim=1)))


@dataclass
class ScoreModel:
    network: ScoreNetwork
    schedule: NoiseSchedule
    input_dim: int
    data_mean: np.ndarray
    data_scale: np.ndarray
    final_loss: Optional[float] = None
    loss_curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def layer_sizes(self) -> List[int]:
        linear = [m for m in self.network.modules() if isinstance(m, nn.Linear)]
        return [linear[0].in_features] + [m.out_features for m in linear]

    @property
    def time_embedding(self) -> str:
        return f"sinusoidal, {EMBEDDING_DIM} features of t, periods 2pi up to 2pi*{MAX_PERIOD:g}"


def build_model(
    input_dim: int,
    hidden_width: int = 128,
    n_hidden: int = 3,
    schedule: Optional[NoiseSchedule] = None,
    seed: int = 0,
    zero_output: bool = True,
) -> ScoreModel:
    """Untrained model; with ``zero_output`` the head starts at zero so eps_theta == 0."""
    schedule = schedule or NoiseSchedule.linear()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = ScoreNetwork(input_dim, hidden_width, n_hidden, schedule.n_steps)
    if zero_output:
        nn.init.zeros_(network.head.weight)
        nn.init.zeros_(network.head.bias)
    return ScoreModel(
        network=network,
        schedule=schedule,
        input_dim=input_dim,
        data_mean=np.zeros(input_dim),
        data_scale=np.ones(input_dim),
    )


def _mix(y0: np.ndarray, alpha_bar: float, noise: np.ndarray) -> np.ndarray:
    return math.sqrt(alpha_bar) * y0 + math.sqrt(1.0 - alpha_bar) * noise


def forward_noise(y0: Sequence[float], t: int, schedule: NoiseSchedule, noise: Sequence[float]) -> np.ndarray:
    """Draw from q(y_t | y_0) using the supplied standard-normal ``noise``."""
    schedule.check_step(t)
    y0 = finite_vector(y0, "y0")
    noise = finite_vector(noise, "noise")
    if y0.size != noise.size:
        raise ValueError(f"y0 has dimension {y0.size} but noise has dimension {noise.size}")
    return _mix(y0, schedule.alpha_bar(t), noise)


def _alpha_bar_tensor(schedule: NoiseSchedule) -> torch.Tensor:
    return torch.tensor(schedule.alpha_bars, dtype=DTYPE)


def _noise_prediction_loss(
    model: ScoreModel, y0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor
) -> torch.Tensor:
    alpha_bar = _alpha_bar_tensor(model.schedule)[t - 1][:, None]
    y_t = alpha_bar.sqrt() * y0 + (1.0 - alpha_bar).sqrt() * noise
    return ((model.network(y_t, t) - noise) ** 2).mean()


def _draw_batch_noise(
    model: ScoreModel, batch: torch.Tensor, generator: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    t = torch.randint(1, model.schedule.n_steps + 1, (batch.shape[0],), generator=generator)
    noise = torch.randn(batch.shape, generator=generator, dtype=DTYPE)
    return t, noise


def _training_step(
    model: ScoreModel,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    generator: torch.Generator,
) -> float:
    t, noise = _draw_batch_noise(model, batch, generator)
    loss = _noise_prediction_loss(model, batch, t, noise)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def _fit_standardization(data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = data.mean(axis=0)
    scale = data.std(axis=0)
    # Constant coordinates keep unit scale.
    scale = np.where(scale > STD_FLOOR, scale, 1.0)
    return mean, scale


def standardize(model: ScoreModel, samples) -> np.ndarray:
    samples = finite_matrix(samples, "samples")
    if samples.shape[1] != model.input_dim:
        raise ValueError(f"samples have dimension {samples.shape[1]}, model expects {model.input_dim}")
    return (samples - model.data_mean) / model.data_scale


def _ema(decay: float):
    """EMA update; the decay ramps from 0.1 up to ``decay`` over the first steps."""

    def update(averaged: torch.Tensor, current: torch.Tensor, n_averaged: torch.Tensor) -> torch.Tensor:
        rate = min(decay, (1.0 + float(n_averaged)) / (10.0 + float(n_averaged)))
        return rate * averaged + (1.0 - rate) * current

    return update


def _train(data: np.ndarray, cfg: TrainConfig, schedule: NoiseSchedule) -> ScoreModel:
    model = build_model(
        data.shape[1], cfg.hidden_width, cfg.n_hidden, schedule, seed=cfg.seed, zero_output=True
    )
    model.data_mean, model.data_scale = _fit_standardization(data)
    scaled = torch.tensor((data - model.data_mean) / model.data_scale, dtype=DTYPE)

    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(
        model.network.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    steps_per_epoch = math.ceil(scaled.shape[0] / cfg.batch_size)
    scheduler = CosineAnnealingLR(
        optimizer, T_max=cfg.epochs * steps_per_epoch, eta_min=cfg.learning_rate * cfg.final_lr_fraction
    )
    averaged = AveragedModel(model.network, avg_fn=_ema(cfg.ema_decay))
    model.network.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(scaled.shape[0], generator=generator)
        losses = []
        for start in range(0, scaled.shape[0], cfg.batch_size):
            batch = scaled[order[start : start + cfg.batch_size]]
            losses.append(_training_step(model, optimizer, batch, generator))
            scheduler.step()
            averaged.update_parameters(model.network)
        epoch_loss = float(np.mean(losses))
        model.loss_curve.append((epoch, epoch_loss))
        if epoch == 1 or epoch % 50 == 0 or epoch == cfg.epochs:
            logger.info(f"epoch {epoch}/{cfg.epochs} mean loss {epoch_loss:.5f}")
    if cfg.ema_decay > 0:
        model.network.load_state_dict(averaged.module.state_dict())
    model.network.eval()
    model.final_loss = model.loss_curve[-1][1]
    return model


def train(data, cfg: Optional[TrainConfig] = None, schedule: Optional[NoiseSchedule] = None) -> ScoreModel:
    """
    Fit eps_theta by minimizing E||eps - eps_theta(y_t, t)||^2 with Adam.

    Args:
    - data: non-empty list of equal-length finite vectors.
    - cfg: training settings; the seed fixes initialization, shuffling, t and noise draws.
    - schedule: noise schedule, linear 1e-4..0.02 over 200 steps by default.

    Returns:
    - A trained ``ScoreModel`` holding the standardization transform and loss curve.
    """
    cfg = cfg or TrainConfig()
    schedule = schedule or NoiseSchedule.linear()
    data = finite_matrix(data, "data")
    logger.info(
        f"train(n={data.shape[0]}, d={data.shape[1]}, epochs={cfg.epochs}, seed={cfg.seed})"
    )
    try:
        return _train(data, cfg, schedule)
    except Exception as e:
        logger.error(f"Error training score model: {str(e)}")
        raise


def _score_batch(model: ScoreModel, y: np.ndarray, t: int) -> np.ndarray:
    model.schedule.check_step(t)
    with torch.no_grad():
        y_tensor = torch.tensor(y, dtype=DTYPE)
        steps = torch.full((y.shape[0],), t, dtype=torch.long)
        eps = model.network(y_tensor, steps).numpy()
    return -eps / math.sqrt(1.0 - model.schedule.alpha_bar(t))


def score(model: ScoreModel, y: Sequence[float], t: int) -> np.ndarray:
    """s_theta(y, t) in the model's standardized data space."""
    y = finite_vector(y, "y")
    if y.size != model.input_dim:
        raise ValueError(f"y has dimension {y.size}, model expects {model.input_dim}")
    return _score_batch(model, y[None, :], t)[0]


def sample(model: ScoreModel, n: int, seed: int = 0) -> np.ndarray:
    """Ancestral reverse recursion from N(0, I) at t = T down to y_0, in data units."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    betas = torch.tensor(model.schedule.betas, dtype=DTYPE)
    alpha_bars = _alpha_bar_tensor(model.schedule)
    generator = torch.Generator().manual_seed(seed)
    y = torch.randn((n, model.input_dim), generator=generator, dtype=DTYPE)
    with torch.no_grad():
        for t in range(model.schedule.n_steps, 0, -1):
            beta, alpha_bar = betas[t - 1], alpha_bars[t - 1]
            steps = torch.full((n,), t, dtype=torch.long)
            eps = model.network(y, steps)
            y = (y - beta / (1.0 - alpha_bar).sqrt() * eps) / (1.0 - beta).sqrt()
            if t > 1:
                y = y + beta.sqrt() * torch.randn(y.shape, generator=generator, dtype=DTYPE)
    return y.numpy() * model.data_scale + model.data_mean


def _fixed_loss(model: ScoreModel, batch: torch.Tensor, seed: int):
    generator = torch.Generator().manual_seed(seed)
    t, noise = _draw_batch_noise(model, batch, generator)
    return lambda: _noise_prediction_loss(model, batch, t, noise)


def gradient_check(model: ScoreModel, batch, seed: int = 0) -> float:
    """Max relative error between autograd and central finite-difference gradients."""
    batch = torch.tensor(finite_matrix(batch, "batch"), dtype=DTYPE)
    loss_fn = _fixed_loss(model, batch, seed)
    parameters = list(model.network.parameters())
    model.network.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in parameters]

    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(parameters, analytic):
            flat, flat_grad = param.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + FD_STEP
                plus = loss_fn().item()
                flat[i] = original - FD_STEP
                minus = loss_fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * FD_STEP)
                exact = flat_grad[i].item()
                denominator = max(abs(exact), abs(numeric), 1e-4)
                worst = max(worst, abs(exact - numeric) / denominator)
    model.network.zero_grad()
    return worst


# ───────────────────────────────
# Persistence
# ───────────────────────────────
def model_to_dict(model: ScoreModel) -> dict:
    linear = [m for m in model.network.modules() if isinstance(m, nn.Linear)]
    return {
        "input_dim": model.input_dim,
        "layer_sizes": model.layer_sizes,
        "time_embedding": model.time_embedding,
        "weights": [m.weight.detach().numpy().ravel().tolist() for m in linear],
        "biases": [m.bias.detach().numpy().tolist() for m in linear],
        "schedule": model.schedule.model_dump(),
        "data_mean": model.data_mean.tolist(),
        "data_scale": model.data_scale.tolist(),
        "final_loss": model.final_loss,
    }


def model_from_dict(payload: dict) -> ScoreModel:
    sizes = payload["layer_sizes"]
    schedule = NoiseSchedule.model_validate(payload["schedule"])
    hidden = sizes[1:-1]
    if len(set(hidden)) != 1:
        raise ValueError(f"hidden layers must share one width, got {hidden}")
    model = build_model(payload["input_dim"], hidden[0], len(hidden), schedule)
    linear = [m for m in model.network.modules() if isinstance(m, nn.Linear)]
    with torch.no_grad():
        for module, weights, biases in zip(linear, payload["weights"], payload["biases"]):
            module.weight.copy_(torch.tensor(weights, dtype=DTYPE).view_as(module.weight))
            module.bias.copy_(torch.tensor(biases, dtype=DTYPE))
    model.data_mean = np.asarray(payload["data_mean"], dtype=float)
    model.data_scale = np.asarray(payload["data_scale"], dtype=float)
    model.final_loss = payload.get("final_loss")
    model.network.eval()
    return model


def save_model(model: ScoreModel, directory) -> None:
    directory = Path(directory)
    write_json(model_to_dict(model), directory / "model.json")
    curve = pd.DataFrame(model.loss_curve, columns=["epoch", "mean_loss"])
    write_csv(curve, directory / "loss.csv")


def load_model(path) -> ScoreModel:
    path = Path(path)
    return model_from_dict(read_json(path / "model.json" if path.is_dir() else path))
