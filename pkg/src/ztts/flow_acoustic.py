"""Flow-based acoustic model: text to latent-sequence distribution.

A convolutional text encoder emits per-token Gaussian prior statistics; an
invertible flow maps latent frames to that prior space with an exact
log-determinant, so the latent likelihood given text is tractable. Training
alternates monotonic alignment search (dynamic programming, exact) with
gradient steps on the aligned likelihood; a duration predictor learned from
the search results drives synthesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError

LOG_2PI = math.log(2.0 * math.pi)
PRIOR_LOG_SIGMA_RANGE = (-7.0, 2.0)


# ---------------------------------------------------------------------------
# Invertible transforms
# ---------------------------------------------------------------------------


class ChannelNorm(nn.Module):
    """Per-channel affine y = x * exp(logs) + bias; identity at init."""

    def __init__(self, channels: int):
        super().__init__()
        self.logs = nn.Parameter(torch.zeros(channels, 1))
        self.bias = nn.Parameter(torch.zeros(channels, 1))

    def forward(self, x):
        y = x * self.logs.exp() + self.bias
        logdet = self.logs.sum() * x.shape[-1]
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        return (y - self.bias) * torch.exp(-self.logs)


class InvertibleChannelMix(nn.Module):
    """Frame-wise invertible channel mixing.

    A fixed random permutation exchanges channels across groups, then one
    shared invertible ``split x split`` matrix mixes within each group.
    Small matrices keep single-precision round-trips tight where a dense
    channels-wide map would accumulate visible roundoff.
    """

    def __init__(self, channels: int, split: int = 4):
        super().__init__()
        if channels % split:
            raise ValueError(f"channels ({channels}) must divide into groups of {split}")
        self.split = split
        perm = torch.randperm(channels)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))
        self.weight = nn.Parameter(torch.linalg.qr(torch.randn(split, split))[0])

    def logabsdet(self) -> torch.Tensor:
        # per frame: one slogdet contribution per channel group
        return torch.linalg.slogdet(self.weight)[1] * (self.perm.numel() // self.split)

    def forward(self, x):
        b, c, t = x.shape
        h = x[:, self.perm].view(b, c // self.split, self.split, t)
        y = torch.einsum("ij,bgjt->bgit", self.weight, h).reshape(b, c, t)
        logdet = self.logabsdet() * t
        return y, logdet.expand(b)

    def inverse(self, y):
        b, c, t = y.shape
        h = y.view(b, c // self.split, self.split, t)
        x = torch.linalg.solve(self.weight, h).reshape(b, c, t)
        return x[:, self.inv_perm]


class CouplingNet(nn.Module):
    """Dilated conv stack producing shift and log-scale for a coupling layer.

    The output projection is zero-initialized so the coupling starts as the
    identity map.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int,
                 kernel_size: int, n_layers: int, dilation_growth: int):
        super().__init__()
        self.pre = nn.Conv1d(in_channels, hidden, 1)
        self.convs = nn.ModuleList()
        for i in range(n_layers):
            d = dilation_growth ** i
            self.convs.append(
                nn.Conv1d(hidden, hidden, kernel_size, dilation=d,
                          padding=(kernel_size - 1) * d // 2)
            )
        self.post = nn.Conv1d(hidden, out_channels, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def forward(self, x):
        h = self.pre(x)
        for conv in self.convs:
            h = conv(torch.nn.functional.leaky_relu(h, 0.1))
        return self.post(h)


class AffineCoupling(nn.Module):
    """Affine coupling: the second half of channels is scaled and shifted
    by functions of the first half.

    The log-scale is softly bounded to +-LOG_SCALE_LIMIT through a tanh so
    a misbehaving net cannot overflow single precision; the bound is wide
    enough never to bind in normal training.
    """

    LOG_SCALE_LIMIT = 5.0

    def __init__(self, channels: int, hidden: int, kernel_size: int,
                 n_layers: int, dilation_growth: int):
        super().__init__()
        if channels % 2:
            raise ValueError("coupling needs an even channel count")
        self.half = channels // 2
        self.net = CouplingNet(self.half, channels, hidden, kernel_size,
                               n_layers, dilation_growth)

    def _stats(self, xa):
        shift, raw = self.net(xa).split(self.half, dim=1)
        log_scale = self.LOG_SCALE_LIMIT * torch.tanh(raw / self.LOG_SCALE_LIMIT)
        return shift, log_scale

    def forward(self, x):
        xa, xb = x.split(self.half, dim=1)
        shift, log_scale = self._stats(xa)
        yb = xb * log_scale.exp() + shift
        logdet = log_scale.sum(dim=(1, 2))
        return torch.cat([xa, yb], dim=1), logdet

    def inverse(self, y):
        ya, yb = y.split(self.half, dim=1)
        shift, log_scale = self._stats(ya)
        xb = (yb - shift) * torch.exp(-log_scale)
        return torch.cat([ya, xb], dim=1)


@dataclass(frozen=True)
class FlowConfig:
    channels: int = 256
    n_blocks: int = 12
    hidden_channels: int = 192
    kernel_size: int = 5
    n_conv_layers: int = 3
    dilation_growth: int = 2
    squeeze: int = 2
    mix_split: int = 4

    def __post_init__(self):
        if self.squeeze < 1:
            raise ValueError("squeeze factor must be >= 1")
        inner = self.channels * self.squeeze
        if inner % 2:
            raise ValueError("channels * squeeze must be even for coupling splits")
        if inner % self.mix_split:
            raise ValueError("channels * squeeze must divide into mix_split groups")


class FlowStack(nn.Module):
    """Squeeze -> n_blocks x [channel norm, channel mix, coupling] -> unsqueeze.

    Frame counts that do not divide the squeeze factor are right-padded by
    repeating the last frame; ``forward`` then returns the padded frame
    count and the log-determinant over all processed frames. Callers track
    the true frame count and slice.
    """

    def __init__(self, cfg: FlowConfig = FlowConfig()):
        super().__init__()
        self.cfg = cfg
        inner = cfg.channels * cfg.squeeze
        self.transforms = nn.ModuleList()
        for _ in range(cfg.n_blocks):
            self.transforms.append(ChannelNorm(inner))
            self.transforms.append(InvertibleChannelMix(inner, cfg.mix_split))
            self.transforms.append(AffineCoupling(
                inner, cfg.hidden_channels, cfg.kernel_size,
                cfg.n_conv_layers, cfg.dilation_growth,
            ))

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        rem = x.shape[-1] % self.cfg.squeeze
        if rem:
            reps = x[..., -1:].expand(*x.shape[:-1], self.cfg.squeeze - rem)
            x = torch.cat([x, reps], dim=-1)
        return x

    def _squeeze(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t = x.shape
        s = self.cfg.squeeze
        return x.view(b, c, t // s, s).permute(0, 3, 1, 2).reshape(b, c * s, t // s)

    def _unsqueeze(self, x: torch.Tensor) -> torch.Tensor:
        b, cs, t = x.shape
        s = self.cfg.squeeze
        return x.view(b, s, cs // s, t).permute(0, 2, 3, 1).reshape(b, cs // s, t * s)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # z: [B, C, T] -> (c [B, C, T_padded], logdet [B])
        h = self._squeeze(self._pad(z))
        logdet = z.new_zeros(z.shape[0])
        for transform in self.transforms:
            h, ld = transform(h)
            logdet = logdet + ld
        return self._unsqueeze(h), logdet

    def inverse(self, c: torch.Tensor) -> torch.Tensor:
        h = self._squeeze(self._pad(c))
        for transform in reversed(self.transforms):
            h = transform.inverse(h)
        return self._unsqueeze(h)


# ---------------------------------------------------------------------------
# Text encoder and duration predictor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    latent_dim: int = 256
    hidden_channels: int = 192
    n_layers: int = 4
    kernel_size: int = 5


@dataclass
class PriorStats:
    """Per-token Gaussian prior statistics, [M, latent_dim] each."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must have matching shapes")

    @property
    def n_tokens(self) -> int:
        return self.mu.shape[0]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dimension of [B, C, T] tensors."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class TextEncoder(nn.Module):
    """Token embedding plus residual conv blocks; emits prior stats and
    hidden states for duration prediction."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden_channels)
        nn.init.normal_(self.embed.weight, 0.0, cfg.hidden_channels ** -0.5)
        self.blocks = nn.ModuleList()
        for _ in range(cfg.n_layers):
            self.blocks.append(nn.ModuleDict({
                "conv": nn.Conv1d(cfg.hidden_channels, cfg.hidden_channels,
                                  cfg.kernel_size, padding=cfg.kernel_size // 2),
                "norm": ChannelLayerNorm(cfg.hidden_channels),
            }))
        self.proj = nn.Conv1d(cfg.hidden_channels, 2 * cfg.latent_dim, 1)

    def forward(self, tokens: torch.Tensor) -> tuple[PriorStats, torch.Tensor]:
        # tokens: [M] int64 -> (stats over [M, latent], hidden [M, hidden])
        if tokens.dim() != 1 or tokens.numel() < 1:
            raise ValueError("expected a non-empty 1-D token sequence")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(
                f"token id out of range [0, {self.cfg.vocab_size}): "
                f"{int(tokens.min())}..{int(tokens.max())}"
            )
        h = self.embed(tokens).t().unsqueeze(0)  # [1, H, M]
        for block in self.blocks:
            h = h + block["norm"](torch.relu(block["conv"](h)))
        stats = self.proj(h).squeeze(0).t()  # [M, 2 * latent]
        mu, log_sigma = stats.chunk(2, dim=1)
        hidden = h.squeeze(0).t()  # [M, H]
        return PriorStats(mu, log_sigma.clamp(*PRIOR_LOG_SIGMA_RANGE)), hidden


class DurationPredictor(nn.Module):
    """Two conv layers plus projection on detached text hidden states,
    predicting log-durations per token."""

    def __init__(self, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(hidden_channels, hidden_channels, kernel_size, padding=pad)
        self.norm1 = ChannelLayerNorm(hidden_channels)
        self.conv2 = nn.Conv1d(hidden_channels, hidden_channels, kernel_size, padding=pad)
        self.norm2 = ChannelLayerNorm(hidden_channels)
        self.proj = nn.Conv1d(hidden_channels, 1, 1)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        # hidden: [M, H]; detached so duration training never shapes the prior
        h = hidden.detach().t().unsqueeze(0)
        h = self.norm1(torch.relu(self.conv1(h)))
        h = self.norm2(torch.relu(self.conv2(h)))
        return self.proj(h).squeeze(0).squeeze(0)  # [M]


# ---------------------------------------------------------------------------
# Monotonic alignment search
# ---------------------------------------------------------------------------


@dataclass
class Alignment:
    """Monotonic surjective map from latent frames to token indices."""

    frame_to_token: np.ndarray  # [N] int64, values in [0, n_tokens)
    n_tokens: int

    def __post_init__(self):
        a = np.asarray(self.frame_to_token, dtype=np.int64)
        self.frame_to_token = a
        if a.ndim != 1 or a.size < 1:
            raise ValueError("alignment must cover at least one frame")
        steps = np.diff(a)
        if a[0] != 0 or a[-1] != self.n_tokens - 1 or np.any((steps != 0) & (steps != 1)):
            raise ValueError("alignment must be monotonic and span all tokens")

    @property
    def n_frames(self) -> int:
        return self.frame_to_token.size

    @property
    def durations(self) -> np.ndarray:
        return np.bincount(self.frame_to_token, minlength=self.n_tokens)


def log_prob_matrix(c: torch.Tensor, prior: PriorStats) -> np.ndarray:
    """Per-(frame, token) diagonal-Gaussian log density, [N, M] float64."""
    cn = c.detach().cpu().double().numpy()
    mu = prior.mu.detach().cpu().double().numpy()
    ls = prior.log_sigma.detach().cpu().double().numpy()
    inv_var = np.exp(-2.0 * ls)  # [M, C]
    const = -0.5 * (cn.shape[1] * LOG_2PI + (2.0 * ls + mu * mu * inv_var).sum(axis=1))
    cross = cn @ (mu * inv_var).T  # [N, M]
    quad = -0.5 * (cn * cn) @ inv_var.T
    return const[None, :] + cross + quad


def _maximum_path(value: np.ndarray) -> np.ndarray:
    """DP argmax over monotonic surjective paths through [M, N] log-probs."""
    m, n = value.shape
    q = np.full((m, n), -np.inf)
    q[0, 0] = value[0, 0]
    for j in range(1, n):
        stay = q[:, j - 1]
        advance = np.concatenate(([-np.inf], q[:-1, j - 1]))
        q[:, j] = np.maximum(stay, advance) + value[:, j]
    path = np.empty(n, dtype=np.int64)
    i = m - 1
    path[-1] = i
    for j in range(n - 2, -1, -1):
        if i > 0 and q[i - 1, j] > q[i, j]:
            i -= 1
        path[j] = i
    return path


def mas_align(c: torch.Tensor, prior: PriorStats) -> Alignment:
    """Likelihood-maximizing monotonic surjective alignment of frames to tokens."""
    n, m = c.shape[0], prior.n_tokens
    if n < m:
        raise AlignmentError(f"cannot align {n} frames onto {m} tokens surjectively")
    value = log_prob_matrix(c, prior)  # [N, M]
    return Alignment(_maximum_path(value.T), m)


def prior_loglik(c: torch.Tensor, prior: PriorStats, alignment: Alignment) -> torch.Tensor:
    """Log-likelihood of frames under their aligned per-token Gaussians."""
    if alignment.n_frames != c.shape[0]:
        raise ValueError(
            f"alignment covers {alignment.n_frames} frames, latents have {c.shape[0]}"
        )
    if alignment.n_tokens != prior.n_tokens:
        raise ValueError(
            f"alignment spans {alignment.n_tokens} tokens, prior has {prior.n_tokens}"
        )
    idx = torch.from_numpy(alignment.frame_to_token).to(c.device)
    mu = prior.mu.index_select(0, idx)
    ls = prior.log_sigma.index_select(0, idx)
    return (-0.5 * (LOG_2PI + 2.0 * ls + (c - mu).pow(2) * torch.exp(-2.0 * ls))).sum()


# ---------------------------------------------------------------------------
# Full acoustic model
# ---------------------------------------------------------------------------


class AcousticModel(nn.Module):
    """Text encoder + invertible flow + duration predictor."""

    def __init__(self, text_cfg: TextEncoderConfig, flow_cfg: FlowConfig | None = None):
        super().__init__()
        if flow_cfg is None:
            flow_cfg = FlowConfig(channels=text_cfg.latent_dim)
        if flow_cfg.channels != text_cfg.latent_dim:
            raise ValueError("flow channels must equal the text encoder's latent dim")
        self.text_encoder = TextEncoder(text_cfg)
        self.flow = FlowStack(flow_cfg)
        self.duration_predictor = DurationPredictor(text_cfg.hidden_channels)

    @property
    def latent_dim(self) -> int:
        return self.text_encoder.cfg.latent_dim

    def encode_text(self, tokens: torch.Tensor) -> tuple[PriorStats, torch.Tensor]:
        return self.text_encoder(tokens)

    def flow_forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map latents [N, C] to prior space: (c [N_padded, C], logdet scalar)."""
        c, logdet = self.flow(z.t().unsqueeze(0))
        return c.squeeze(0).t(), logdet.squeeze(0)

    def flow_inverse(self, c: torch.Tensor) -> torch.Tensor:
        """Exact inverse of :meth:`flow_forward` (padded frame count)."""
        z = self.flow.inverse(c.t().unsqueeze(0))
        return z.squeeze(0).t()

    def predict_durations(self, hidden: torch.Tensor) -> torch.Tensor:
        """Integer durations from text hidden states, at least 1 per token."""
        log_d = self.duration_predictor(hidden)
        return torch.clamp(torch.round(torch.exp(log_d)), min=1.0).long()

    def synthesize_latents(
        self,
        tokens: torch.Tensor,
        temperature: float = 0.667,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Sample a latent sequence for a token sequence.

        Returns (z [sum(durations), C], durations [M]). Temperature scales
        the prior standard deviations; zero gives the deterministic
        mean trajectory.
        """
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        prior, hidden = self.encode_text(tokens)
        durations = self.predict_durations(hidden)
        mu = prior.mu.repeat_interleave(durations, dim=0)  # [N, C]
        ls = prior.log_sigma.repeat_interleave(durations, dim=0)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        c = mu + temperature * ls.exp() * eps
        z = self.flow_inverse(c)
        return z[: mu.shape[0]], durations


def acoustic_train_step(
    model: AcousticModel,
    optimizer: torch.optim.Optimizer,
    post_mu: torch.Tensor,
    post_log_sigma: torch.Tensor,
    tokens: torch.Tensor,
    generator: torch.Generator | None = None,
) -> dict[str, float]:
    """One optimization step on a single utterance.

    A fresh latent target is sampled from the stored posterior statistics
    every step; the alignment is re-searched under the current parameters
    and treated as constant within the gradient step.
    """
    n, dim = post_mu.shape
    eps = torch.randn(post_mu.shape, generator=generator,
                      dtype=post_mu.dtype, device=post_mu.device)
    z = post_mu + post_log_sigma.exp() * eps

    c_full, logdet = model.flow_forward(z)
    c = c_full[:n]
    prior, hidden = model.encode_text(tokens)
    alignment = mas_align(c, prior)
    ll = prior_loglik(c, prior, alignment)
    nll_per_dim = -(ll + logdet) / (n * dim)

    log_d_target = torch.from_numpy(alignment.durations).to(post_mu.dtype).clamp(min=1.0).log()
    log_d_pred = model.duration_predictor(hidden)
    duration_loss = (log_d_pred - log_d_target).pow(2).mean()

    loss = nll_per_dim + duration_loss
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {
        "nll_per_dim": float(nll_per_dim.detach()),
        "duration_loss": float(duration_loss.detach()),
        "total": float(loss.detach()),
    }
