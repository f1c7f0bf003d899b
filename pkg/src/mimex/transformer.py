"""MAE-style masked sequence autoencoder built on :mod:`mimex.autodiff`.

The encoder projects each kept token to ``encoder_dim``, adds a fixed
sinusoidal embedding for the token's original window position and runs a
stack of pre-norm transformer blocks.  The decoder projects latents to
``decoder_dim``, scatters them back into a length-T sequence whose masked
slots hold a learned mask token, adds positions again, runs its own block
stack and projects back to the input feature dimension.

All batched entry points take ``[B, L, D]`` arrays; the per-window helpers
accept ``[L, D]`` and return unbatched results.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

CHECKPOINT_MAGIC = "MIMEX-CHECKPOINT v1"


@dataclass
class TransformerConfig:
    input_dim: int
    max_len: int
    encoder_dim: int = 128
    encoder_blocks: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_blocks: int = 1
    decoder_heads: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("input_dim", "max_len", "encoder_dim", "encoder_blocks", "encoder_heads",
                     "decoder_dim", "decoder_blocks", "decoder_heads"):
            if getattr(self, name) < 1:
                raise ContractError(f"TransformerConfig.{name} must be >= 1")
        if self.encoder_dim % self.encoder_heads:
            raise ContractError("encoder_dim must be divisible by encoder_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ContractError("decoder_dim must be divisible by decoder_heads")
        if self.mlp_ratio <= 0:
            raise ContractError("mlp_ratio must be positive")

    def doubled_decoder(self) -> "TransformerConfig":
        """The "larger" preset: decoder depth, heads and width all doubled."""
        d = asdict(self)
        d.update(decoder_dim=2 * self.decoder_dim, decoder_blocks=2 * self.decoder_blocks,
                 decoder_heads=2 * self.decoder_heads)
        return TransformerConfig(**d)


def block_param_count(dim: int, mlp_ratio: float) -> int:
    hidden = int(dim * mlp_ratio)
    return 4 * dim * dim + 9 * dim + 2 * dim * hidden + hidden


def expected_param_count(cfg: TransformerConfig) -> int:
    """Closed-form parameter count of :class:`MaskedSequenceAutoencoder`."""
    e, d, D = cfg.encoder_dim, cfg.decoder_dim, cfg.input_dim
    encoder = D * e + e + cfg.encoder_blocks * block_param_count(e, cfg.mlp_ratio) + 2 * e
    decoder = (e * d + d) + d + cfg.decoder_blocks * block_param_count(d, cfg.mlp_ratio) + 2 * d + (d * D + D)
    return encoder + decoder


def positional_embedding(length: int, dim: int, max_len: int | None = None, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal table: even columns sin, odd columns cos."""
    if max_len is not None and length > max_len:
        raise ContractError(f"positional_embedding length {length} exceeds max_len {max_len}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table.astype(dtype)


class Linear:
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, name: str, dtype=np.float32):
        self.weight = ad.parameter(ad.glorot_uniform(rng, fan_in, fan_out, dtype), f"{name}.weight")
        self.bias = ad.parameter(np.zeros(fan_out, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, dim: int, name: str, dtype=np.float32, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(dim, dtype=dtype), f"{name}.gain")
        self.bias = ad.parameter(np.zeros(dim, dtype=dtype), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)

    def parameters(self) -> list[Tensor]:
        return [self.gain, self.bias]


class Block:
    """Pre-norm transformer block with full (bidirectional) attention."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: float, name: str, dtype=np.float32):
        if dim % heads:
            raise ContractError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim, f"{name}.norm1", dtype)
        self.q = Linear(rng, dim, dim, f"{name}.attn.q", dtype)
        self.k = Linear(rng, dim, dim, f"{name}.attn.k", dtype)
        self.v = Linear(rng, dim, dim, f"{name}.attn.v", dtype)
        self.proj = Linear(rng, dim, dim, f"{name}.attn.proj", dtype)
        self.norm2 = LayerNorm(dim, f"{name}.norm2", dtype)
        self.fc1 = Linear(rng, dim, hidden, f"{name}.mlp.fc1", dtype)
        self.fc2 = Linear(rng, hidden, dim, f"{name}.mlp.fc2", dtype)

    def parameters(self) -> list[Tensor]:
        out = []
        for mod in (self.norm1, self.q, self.k, self.v, self.proj, self.norm2, self.fc1, self.fc2):
            out.extend(mod.parameters())
        return out

    def attention(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        h, dh = self.heads, d // self.heads

        def heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        return self.proj(ctx)

    def __call__(self, x: Tensor) -> Tensor:
        return attention_block(x, self)


def attention_block(x: Tensor, block: Block) -> Tensor:
    """``x + MHSA(LN(x))`` followed by ``+ MLP(LN(.))``; shape preserved."""
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != block.dim:
        raise DimensionError(f"attention_block expects [..., L, {block.dim}], got {x.shape}")
    x = ad.add(x, block.attention(block.norm1(x)))
    x = ad.add(x, block.fc2(ad.gelu(block.fc1(block.norm2(x)))))
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


class MaskedSequenceAutoencoder:
    """Encode-and-mask plus decode modules of the masked sequence model."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        e, d = cfg.encoder_dim, cfg.decoder_dim
        self.embed = Linear(rng, cfg.input_dim, e, "encoder.embed", dtype)
        self.encoder_blocks = [Block(rng, e, cfg.encoder_heads, cfg.mlp_ratio, f"encoder.blocks.{i}", dtype)
                               for i in range(cfg.encoder_blocks)]
        self.encoder_norm = LayerNorm(e, "encoder.norm", dtype)
        self.decoder_embed = Linear(rng, e, d, "decoder.embed", dtype)
        self.mask_token = ad.parameter((0.02 * rng.standard_normal(d)).astype(dtype), "decoder.mask_token")
        self.decoder_blocks = [Block(rng, d, cfg.decoder_heads, cfg.mlp_ratio, f"decoder.blocks.{i}", dtype)
                               for i in range(cfg.decoder_blocks)]
        self.decoder_norm = LayerNorm(d, "decoder.norm", dtype)
        self.head = Linear(rng, d, cfg.input_dim, "decoder.head", dtype)
        self.enc_pos = positional_embedding(cfg.max_len, e, dtype=dtype)
        self.dec_pos = positional_embedding(cfg.max_len, d, dtype=dtype)

    def parameters(self) -> list[Tensor]:
        """All learnable tensors in checkpoint order."""
        out = self.embed.parameters()
        for b in self.encoder_blocks:
            out.extend(b.parameters())
        out.extend(self.encoder_norm.parameters())
        out.extend(self.decoder_embed.parameters())
        out.append(self.mask_token)
        for b in self.decoder_blocks:
            out.extend(b.parameters())
        out.extend(self.decoder_norm.parameters())
        out.extend(self.head.parameters())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -------------------------------------------------------------- encoder

    def encode(self, kept_tokens, kept_positions) -> Tensor:
        """Embed kept tokens at their original positions and run the encoder."""
        tokens = kept_tokens if isinstance(kept_tokens, Tensor) else Tensor(np.asarray(kept_tokens, dtype=self.dtype))
        positions = np.asarray(kept_positions, dtype=np.int64)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = ad.reshape(tokens, (1,) + tokens.shape)
            positions = positions[None]
        B, L, D = tokens.shape
        if L == 0:
            raise ContractError("encode needs at least one kept token")
        if D != self.cfg.input_dim or positions.shape != (B, L):
            raise DimensionError(f"encode got tokens {tokens.shape} and positions {positions.shape}")
        if L > 1 and (np.diff(np.sort(positions, axis=-1), axis=-1) == 0).any():
            raise ContractError("kept positions must be distinct")
        if positions.min() < 0 or positions.max() >= self.cfg.max_len:
            raise ContractError("kept positions fall outside the window")
        x = ad.add(self.embed(tokens), self.enc_pos[positions])
        for blk in self.encoder_blocks:
            x = attention_block(x, blk)
        x = self.encoder_norm(x)
        return ad.reshape(x, x.shape[1:]) if squeeze else x

    # -------------------------------------------------------------- decoder

    def decoder_input(self, latents: Tensor | None, time_mask: np.ndarray) -> Tensor:
        """Length-T decoder sequence before attention: kept latents, mask tokens, positions."""
        mask = np.asarray(time_mask, dtype=bool)
        B, T = mask.shape
        if T > self.cfg.max_len:
            raise ContractError(f"window length {T} exceeds max_len {self.cfg.max_len}")
        n_kept = (~mask).sum(axis=1)
        if (n_kept != n_kept[0]).any():
            raise ContractError("all windows in a batch must keep the same number of tokens")
        L = int(n_kept[0])
        got = 0 if latents is None else latents.shape[1]
        if got != L:
            raise ContractError(f"decode got {got} latents but the mask keeps {L} positions")
        d = self.cfg.decoder_dim
        masked_f = mask.astype(self.dtype)[..., None]
        x = ad.matmul(Tensor(masked_f), ad.reshape(self.mask_token, (1, d)))
        if L:
            keep_idx = np.nonzero(~mask)[1].reshape(B, L)
            x = ad.add(x, ad.scatter_rows(self.decoder_embed(latents), keep_idx, T))
        return ad.add(x, np.broadcast_to(self.dec_pos[:T], (B, T, d)))

    def decode(self, latents, time_mask) -> Tensor:
        mask = np.asarray(time_mask, dtype=bool)
        squeeze = mask.ndim == 1
        if squeeze:
            mask = mask[None]
            if latents is not None:
                latents = ad.reshape(latents, (1,) + latents.shape)
        x = self.decoder_input(latents, mask)
        for blk in self.decoder_blocks:
            x = attention_block(x, blk)
        x = self.head(self.decoder_norm(x))
        return ad.reshape(x, x.shape[1:]) if squeeze else x

    # -------------------------------------------------------------- full pass

    def reconstruct(self, windows, time_mask=None, feature_mask=None) -> Tensor:
        """Masked forward pass over ``windows[B, T, D]``.

        With a time mask the kept rows are gathered and encoded and the
        decoder fills masked rows with the mask token.  With a feature mask
        the masked cells are zeroed and every token is encoded.  A time mask
        that keeps nothing skips the encoder (pure mask-token decoding).
        """
        x = windows if isinstance(windows, Tensor) else Tensor(np.asarray(windows, dtype=self.dtype))
        B, T, _ = x.shape
        if feature_mask is not None:
            visible = ~np.asarray(feature_mask, dtype=bool)
            positions = np.broadcast_to(np.arange(T), (B, T))
            return self.decode(self.encode(ad.mul(x, visible), positions), np.zeros((B, T), dtype=bool))
        mask = np.asarray(time_mask, dtype=bool)
        L = int((~mask[0]).sum())
        if L == 0:
            return self.decode(None, mask)
        keep_idx = np.nonzero(~mask)[1].reshape(B, L)
        return self.decode(self.encode(ad.gather_rows(x, keep_idx), keep_idx), mask)

    def masked_loss(self, windows, time_mask=None, feature_mask=None) -> Tensor:
        pred = self.reconstruct(windows, time_mask, feature_mask)
        arr = windows.data if isinstance(windows, Tensor) else np.asarray(windows, dtype=self.dtype)
        return ad.masked_mse(pred, arr, feature_mask if feature_mask is not None else time_mask)

    def per_window_loss(self, windows, time_mask=None, feature_mask=None) -> np.ndarray:
        """Masked MSE of each window separately, no graph recorded."""
        arr = np.asarray(windows, dtype=self.dtype)
        with ad.no_grad():
            pred = self.reconstruct(arr, time_mask, feature_mask).data
        if feature_mask is not None:
            cells = np.asarray(feature_mask, dtype=bool)
        else:
            cells = np.broadcast_to(np.asarray(time_mask, dtype=bool)[..., None], arr.shape)
        sq = np.where(cells, (pred - arr) ** 2, 0.0)
        return sq.reshape(len(arr), -1).sum(axis=1) / cells.reshape(len(arr), -1).sum(axis=1)

    # -------------------------------------------------------------- checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise DimensionError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data = np.asarray(state[p.name], dtype=self.dtype).copy()


def save_checkpoint(model: MaskedSequenceAutoencoder, path) -> None:
    """Text header of ``name shape`` lines, then little-endian float32 data in that order."""
    params = model.parameters()
    lines = [CHECKPOINT_MAGIC, str(len(params))]
    lines += [f"{p.name} {'x'.join(str(s) for s in p.shape)}" for p in params]
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<I", raw[:4])
    lines = raw[4:4 + hlen].decode("ascii").splitlines()
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = 4 + hlen
    out = {}
    for line in lines[2:2 + int(lines[1])]:
        name, shape_s = line.split(" ")
        shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
        n = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    return out


def load_checkpoint(model: MaskedSequenceAutoencoder, path) -> None:
    model.load_state_dict(read_checkpoint(path))
