"""Ladder time-convolution autoencoder.

The encoder stacks one conv block per ladder (time_conv -> batch_norm ->
ReLU, stride 2 on the block's first conv), so each ladder sees a more
abstract, time-compressed view; affine heads read (mu_l, log_sigma_l) off
the flattened block output.  The decoder mirrors the chain with transposed
convolutions, injecting each lower ladder's latent through a learnable
Hadamard gate applied to an affine projection, and a final linear time-conv
head emits the mean of a fixed-variance factored Gaussian over sequences.

Decoder target lengths come from the recorded encoder extents, so
decode(encode(x)) reproduces the input shape exactly for any supported T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import (
    BatchNormState,
    LOG_SIGMA_CLAMP,
    RngStream,
    Tensor,
    conv_out_len,
    he_normal,
    linear_normal,
    ones_param,
    zeros_param,
)


@dataclass(frozen=True)
class LadderConfig:
    n_ladders: int = 3
    latent_dims: tuple[int, ...] = (8, 4, 2)
    channels: int = 64
    block_depth: int = 2
    kernel: int = 3
    stride: int = 2
    input_channels: int = 2
    t_steps: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_ladders < 1:
            raise ValueError("need at least one ladder")
        if len(self.latent_dims) != self.n_ladders:
            raise ValueError(f"latent_dims {self.latent_dims} must have "
                             f"{self.n_ladders} entries")
        positives = (*self.latent_dims, self.channels, self.block_depth,
                     self.kernel, self.stride, self.input_channels, self.t_steps)
        if any(v < 1 for v in positives):
            raise ValueError("all extents must be positive")

    @property
    def extents(self) -> tuple[int, ...]:
        """Per-ladder time extents (strictly decreasing for stride > 1)."""
        out = []
        t = self.t_steps
        for _ in range(self.n_ladders):
            t = conv_out_len(t, self.stride)
            out.append(t)
        return tuple(out)

    @property
    def total_latent_dim(self) -> int:
        return sum(self.latent_dims)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class EncoderOutput:
    mus: list[Tensor]
    log_sigmas: list[Tensor]
    extents: tuple[int, ...]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _TimeConv:
    def __init__(self, c_in, c_out, kernel, stride, rng, dtype):
        self.stride = stride
        self.w = he_normal((c_out, c_in, kernel), c_in * kernel, rng, dtype)
        self.b = zeros_param((c_out,), dtype)

    def __call__(self, x):
        return tt.time_conv(x, self.w, self.b, stride=self.stride)

    def named_params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def named_buffers(self, prefix):
        return {}


class _TimeDeconv:
    def __init__(self, c_in, c_out, kernel, stride, rng, dtype):
        self.stride = stride
        self.w = he_normal((c_in, c_out, kernel), c_in * kernel, rng, dtype)
        self.b = zeros_param((c_out,), dtype)

    def __call__(self, x, target_t):
        return tt.time_deconv(x, self.w, self.b, stride=self.stride, target_t=target_t)

    def named_params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def named_buffers(self, prefix):
        return {}


class _BatchNorm:
    def __init__(self, channels, dtype):
        self.gamma = ones_param((channels,), dtype)
        self.shift = zeros_param((channels,), dtype)
        self.state = BatchNormState(channels, dtype)

    def __call__(self, x, train, update_running):
        return tt.batch_norm(x, self.gamma, self.shift, self.state,
                             train=train, update_running=update_running)

    def named_params(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.shift": self.shift}

    def named_buffers(self, prefix):
        return {f"{prefix}.running_mean": self.state.running_mean,
                f"{prefix}.running_var": self.state.running_var}


class _Affine:
    def __init__(self, n_in, n_out, rng, dtype):
        self.w = linear_normal((n_out, n_in), n_in, rng, dtype)
        self.b = zeros_param((n_out,), dtype)

    def __call__(self, x):
        return tt.affine(x, self.w, self.b)

    def named_params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def named_buffers(self, prefix):
        return {}


class _ConvBlock:
    """block_depth x (time_conv -> batch_norm -> relu), stride on first conv."""

    def __init__(self, c_in, c_out, kernel, stride, depth, rng, dtype):
        self.convs = []
        self.norms = []
        for d in range(depth):
            self.convs.append(_TimeConv(c_in if d == 0 else c_out, c_out, kernel,
                                        stride if d == 0 else 1, rng, dtype))
            self.norms.append(_BatchNorm(c_out, dtype))

    def __call__(self, x, train, update_running):
        for conv, norm in zip(self.convs, self.norms):
            x = tt.relu(norm(conv(x), train, update_running))
        return x

    def named_params(self, prefix):
        out = {}
        for d, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            out.update(conv.named_params(f"{prefix}.conv{d}"))
            out.update(norm.named_params(f"{prefix}.bn{d}"))
        return out

    def named_buffers(self, prefix):
        out = {}
        for d, norm in enumerate(self.norms):
            out.update(norm.named_buffers(f"{prefix}.bn{d}"))
        return out


class _DeconvBlock:
    """Upsampling mirror of _ConvBlock: stride on the first deconv, which
    expands to ``target_t``; the rest keep that length."""

    def __init__(self, channels, kernel, stride, depth, rng, dtype):
        self.deconvs = []
        self.norms = []
        for d in range(depth):
            self.deconvs.append(_TimeDeconv(channels, channels, kernel,
                                            stride if d == 0 else 1, rng, dtype))
            self.norms.append(_BatchNorm(channels, dtype))

    def __call__(self, x, target_t, train, update_running):
        for deconv, norm in zip(self.deconvs, self.norms):
            x = deconv(x, target_t)
            x = tt.relu(norm(x, train, update_running))
        return x

    def named_params(self, prefix):
        out = {}
        for d, (deconv, norm) in enumerate(zip(self.deconvs, self.norms)):
            out.update(deconv.named_params(f"{prefix}.deconv{d}"))
            out.update(norm.named_params(f"{prefix}.bn{d}"))
        return out

    def named_buffers(self, prefix):
        out = {}
        for d, norm in enumerate(self.norms):
            out.update(norm.named_buffers(f"{prefix}.bn{d}"))
        return out


# ---------------------------------------------------------------------------
# the ladder model
# ---------------------------------------------------------------------------

class LadderModel:
    def __init__(self, config: LadderConfig, seed: int = 0):
        self.config = config
        self.extents = config.extents
        dtype = config.np_dtype
        rng = RngStream(seed, key=0)
        ch, k, st, depth = config.channels, config.kernel, config.stride, config.block_depth
        n = config.n_ladders

        self.enc_blocks = [
            _ConvBlock(config.input_channels if i == 0 else ch, ch, k, st, depth,
                       rng, dtype)
            for i in range(n)
        ]
        self.mu_heads = [
            _Affine(ch * self.extents[i], config.latent_dims[i], rng, dtype)
            for i in range(n)
        ]
        self.log_sigma_heads = [
            _Affine(ch * self.extents[i], config.latent_dims[i], rng, dtype)
            for i in range(n)
        ]
        self.dec_input = _Affine(config.latent_dims[-1], ch * self.extents[-1],
                                 rng, dtype)
        self.dec_blocks = [
            _DeconvBlock(ch, k, st, depth, rng, dtype) for _ in range(n)
        ]
        # gates inject ladders 0..n-2 into the upsampling chain
        self.gate_projs = [
            _Affine(config.latent_dims[i], ch * self.extents[i], rng, dtype)
            for i in range(n - 1)
        ]
        self.gates = [ones_param((ch, self.extents[i]), dtype) for i in range(n - 1)]
        self.out_head = _TimeConv(ch, config.input_channels, k, 1, rng, dtype)

        self._params = self._collect_params()
        self._buffers = self._collect_buffer_states()

    # -- registry ----------------------------------------------------------

    def _collect_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.enc_blocks):
            out.update(block.named_params(f"enc{i}"))
        for i, head in enumerate(self.mu_heads):
            out.update(head.named_params(f"mu_head{i}"))
        for i, head in enumerate(self.log_sigma_heads):
            out.update(head.named_params(f"log_sigma_head{i}"))
        out.update(self.dec_input.named_params("dec_input"))
        for i, block in enumerate(self.dec_blocks):
            out.update(block.named_params(f"dec{i}"))
        for i, proj in enumerate(self.gate_projs):
            out.update(proj.named_params(f"gate_proj{i}"))
        for i, gate in enumerate(self.gates):
            out[f"gate{i}"] = gate
        out.update(self.out_head.named_params("out_head"))
        return out

    def _collect_buffer_states(self) -> dict[str, BatchNormState]:
        out: dict[str, BatchNormState] = {}
        for i, block in enumerate(self.enc_blocks):
            for d, norm in enumerate(block.norms):
                out[f"enc{i}.bn{d}"] = norm.state
        for i, block in enumerate(self.dec_blocks):
            for d, norm in enumerate(block.norms):
                out[f"dec{i}.bn{d}"] = norm.state
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return self._params

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in self._buffers.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        for name, state in self._buffers.items():
            state.running_mean[...] = arrays[f"{name}.running_mean"]
            state.running_var[...] = arrays[f"{name}.running_var"]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    # -- forward pieces ------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.config.np_dtype)
        if x.ndim != 3 or x.shape[1] != self.config.input_channels \
                or x.shape[2] != self.config.t_steps:
            raise ValueError(
                f"expected [B, {self.config.input_channels}, {self.config.t_steps}], "
                f"got {x.shape}")
        return x

    def encode(self, x, train: bool = False, update_running: bool | None = None) -> EncoderOutput:
        if update_running is None:
            update_running = train
        xt = x if isinstance(x, Tensor) else Tensor(self._check_input(x))
        h = xt
        mus, log_sigmas = [], []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, train, update_running)
            flat = tt.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
            mus.append(self.mu_heads[i](flat))
            log_sigmas.append(
                tt.clip(self.log_sigma_heads[i](flat), -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
        return EncoderOutput(mus, log_sigmas, self.extents)

    def decode(self, zs: list[Tensor], train: bool = False,
               update_running: bool | None = None) -> Tensor:
        if update_running is None:
            update_running = train
        n = self.config.n_ladders
        if len(zs) != n:
            raise ValueError(f"expected {n} latent tensors, got {len(zs)}")
        for i, z in enumerate(zs):
            if z.shape[-1] != self.config.latent_dims[i]:
                raise ValueError(f"ladder {i} latent dim {z.shape[-1]} != "
                                 f"{self.config.latent_dims[i]}")
        n_batch = zs[0].shape[0]
        ch = self.config.channels
        h = tt.reshape(self.dec_input(zs[-1]), (n_batch, ch, self.extents[-1]))
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                proj = tt.reshape(self.gate_projs[i](zs[i]), (n_batch, ch, self.extents[i]))
                h = tt.add(h, tt.mul(self.gates[i], proj))
            target = self.extents[i - 1] if i > 0 else self.config.t_steps
            h = self.dec_blocks[i](h, target, train, update_running)
        return self.out_head(h)

    def forward(self, x, rng: RngStream | None, train: bool = True) -> tuple[Tensor, EncoderOutput, list[Tensor]]:
        enc = self.encode(x, train=train)
        zs = [tt.reparameterize(mu, ls, rng) for mu, ls in zip(enc.mus, enc.log_sigmas)]
        recon = self.decode(zs, train=train)
        return recon, enc, zs

    # -- numpy conveniences (no grad) ----------------------------------------

    def posterior_params(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode posterior (mu, log_sigma), ladders concatenated: [B, D]."""
        enc = self.encode(x, train=False)
        mu = np.concatenate([m.data for m in enc.mus], axis=1)
        ls = np.concatenate([s.data for s in enc.log_sigmas], axis=1)
        return mu, ls

    def posterior_means_per_ladder(self, x: np.ndarray) -> list[np.ndarray]:
        enc = self.encode(x, train=False)
        return [m.data for m in enc.mus]

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode deterministic reconstruction from posterior means."""
        enc = self.encode(x, train=False)
        return self.decode(enc.mus, train=False).data

    def decode_arrays(self, zs: list[np.ndarray]) -> np.ndarray:
        tensors = [Tensor(np.asarray(z, dtype=self.config.np_dtype)) for z in zs]
        return self.decode(tensors, train=False).data

    def ladder_of_dim(self) -> np.ndarray:
        """Ladder index of every concatenated latent dimension."""
        return np.repeat(np.arange(self.config.n_ladders),
                         np.array(self.config.latent_dims))


# ---------------------------------------------------------------------------
# pointwise baseline
# ---------------------------------------------------------------------------

class PointwiseBetaVAE:
    """Small affine VAE over individual time steps, no sequence structure.

    Exists to contrast against the sequence model: its latent traversals
    move single points, not whole trajectories.
    """

    def __init__(self, input_dim: int = 2, latent_dim: int = 2, hidden: int = 64,
                 seed: int = 0, dtype: str = "float64"):
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        np_dtype = np.dtype(dtype)
        self.np_dtype = np_dtype
        # raw <-> network space affine map (identity until calibrated); the
        # unit decoder variance only trades off sensibly on unit-scale data
        self.x_offset = np.zeros(input_dim, dtype=np_dtype)
        self.x_scale = np.ones(input_dim, dtype=np_dtype)
        rng = RngStream(seed, key=1)
        self.enc1 = _Affine(input_dim, hidden, rng, np_dtype)
        self.enc2 = _Affine(hidden, hidden, rng, np_dtype)
        self.mu_head = _Affine(hidden, latent_dim, rng, np_dtype)
        self.log_sigma_head = _Affine(hidden, latent_dim, rng, np_dtype)
        self.dec1 = _Affine(latent_dim, hidden, rng, np_dtype)
        self.dec2 = _Affine(hidden, hidden, rng, np_dtype)
        self.dec_out = _Affine(hidden, input_dim, rng, np_dtype)
        self._params = {}
        for name, layer in (("enc1", self.enc1), ("enc2", self.enc2),
                            ("mu_head", self.mu_head),
                            ("log_sigma_head", self.log_sigma_head),
                            ("dec1", self.dec1), ("dec2", self.dec2),
                            ("dec_out", self.dec_out)):
            self._params.update(layer.named_params(name))

    def named_parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def set_normalization(self, offset: np.ndarray, scale: np.ndarray) -> None:
        self.x_offset = np.asarray(offset, dtype=self.np_dtype)
        self.x_scale = np.asarray(scale, dtype=self.np_dtype)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=self.np_dtype) - self.x_offset) / self.x_scale

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Posterior over the latent; raw array inputs are normalized first."""
        if not isinstance(x, Tensor):
            x = np.asarray(x)
            if x.ndim != 2 or x.shape[1] != self.input_dim:
                raise ValueError(f"expected [B, {self.input_dim}], got {x.shape}")
            x = Tensor(self.normalize(x))
        xt = x
        if xt.ndim != 2 or xt.shape[1] != self.input_dim:
            raise ValueError(f"expected [B, {self.input_dim}], got {xt.shape}")
        h = tt.relu(self.enc2(tt.relu(self.enc1(xt))))
        mu = self.mu_head(h)
        log_sigma = tt.clip(self.log_sigma_head(h), -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
        return mu, log_sigma

    def decode(self, z: Tensor) -> Tensor:
        """Mean in normalized space (the training target space)."""
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.np_dtype))
        return self.dec_out(tt.relu(self.dec2(tt.relu(self.dec1(zt)))))

    def decode_points(self, z: np.ndarray) -> np.ndarray:
        """Decoded means mapped back to raw coordinates."""
        return self.decode(z).data * self.x_scale + self.x_offset

    def forward(self, x, rng: RngStream | None) -> tuple[Tensor, Tensor, Tensor]:
        mu, log_sigma = self.encode(x)
        z = tt.reparameterize(mu, log_sigma, rng)
        return self.decode(z), mu, log_sigma
