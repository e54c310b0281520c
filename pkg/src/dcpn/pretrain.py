"""Uniform-masking MAE pretraining for the pyramid encoder.

Pipeline per image: a grid of ``patch_size`` patches is uniformly sampled (one kept patch per
2x2 cell), a fraction of the kept patches is secondarily masked with a learnable token, the kept
patches are packed into a half-resolution compact image, encoded by the pyramid encoder, upsampled
back to the kept-patch grid by pixel shuffle, and decoded over the full patch grid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from pydantic import ConfigDict
from pydantic.dataclasses import dataclass as pdataclass

from .checkpoint import config_dict, load_checkpoint, save_checkpoint
from .encoders import (TOTAL_STRIDE, PyramidEncoder, PyramidEncoderConfig, _init_transformer_weights,
                       grid_pos_embed, to_nchw, Mlp)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# --- masking -----------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    """Masking state for one image on a ``grid_h x grid_w`` patch grid.

    ``kept[k]`` is the flat patch index kept in the k-th 2x2 cell (cells in row-major order);
    ``sm_masked`` lists the kept indices replaced by the mask token.
    """

    grid_h: int
    grid_w: int
    kept: np.ndarray
    sm_masked: np.ndarray

    @property
    def compact_shape(self) -> tuple[int, int]:
        return self.grid_h // 2, self.grid_w // 2

    def visible(self) -> np.ndarray:
        """Boolean grid of patches whose content reaches the encoder."""
        vis = np.zeros(self.grid_h * self.grid_w, dtype=bool)
        vis[self.kept] = True
        vis[self.sm_masked] = False
        return vis.reshape(self.grid_h, self.grid_w)

    def dropped(self) -> np.ndarray:
        drop = np.ones(self.grid_h * self.grid_w, dtype=bool)
        drop[self.kept] = False
        return drop.reshape(self.grid_h, self.grid_w)


def uniform_sample_mask(grid_h: int, grid_w: int, rng: np.random.Generator) -> MaskPlan:
    if grid_h < 2 or grid_w < 2 or grid_h % 2 or grid_w % 2:
        raise ValueError(f"uniform sampling needs an even patch grid, got {grid_h}x{grid_w}")
    ch, cw = grid_h // 2, grid_w // 2
    offset = rng.integers(0, 4, size=ch * cw)
    cell_r, cell_c = np.divmod(np.arange(ch * cw), cw)
    rows = 2 * cell_r + offset // 2
    cols = 2 * cell_c + offset % 2
    return MaskPlan(grid_h, grid_w, rows * grid_w + cols, np.zeros(0, dtype=np.int64))


def secondary_mask(plan: MaskPlan, rng: np.random.Generator, ratio: float = 0.25) -> MaskPlan:
    if len(plan.sm_masked):
        raise ValueError("plan already carries a secondary mask")
    if not 0 <= ratio < 1:
        raise ValueError(f"secondary mask ratio must be in [0, 1), got {ratio}")
    n = int(math.floor(ratio * len(plan.kept)))
    chosen = np.sort(rng.choice(plan.kept, size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
    return MaskPlan(plan.grid_h, plan.grid_w, plan.kept, chosen.astype(np.int64))


def make_plans(batch: int, grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator) -> list[MaskPlan]:
    return [secondary_mask(uniform_sample_mask(grid_h, grid_w, rng), rng, ratio) for _ in range(batch)]


def _compact_index(plans: Sequence[MaskPlan], t: int):
    """Source (row, col) of every compact-map position, each B x Hc x Wc, plus the SM mask."""
    gh, gw = plans[0].grid_h, plans[0].grid_w
    ch, cw = gh // 2, gw // 2
    dy, dx = np.divmod(np.arange(t * t), t)
    rows = np.empty((len(plans), ch * t, cw * t), dtype=np.int64)
    cols = np.empty_like(rows)
    masked = np.zeros_like(rows, dtype=bool)
    for b, p in enumerate(plans):
        if (p.grid_h, p.grid_w) != (gh, gw):
            raise ValueError("all plans in a batch must share one grid")
        pr, pc = np.divmod(p.kept, gw)  # source patch of each cell
        # patch -> t x t token block
        src_r = (pr[:, None] * t + dy[None]).reshape(ch, cw, t, t)
        src_c = (pc[:, None] * t + dx[None]).reshape(ch, cw, t, t)
        rows[b] = src_r.transpose(0, 2, 1, 3).reshape(ch * t, cw * t)
        cols[b] = src_c.transpose(0, 2, 1, 3).reshape(ch * t, cw * t)
        sm = np.isin(p.kept, p.sm_masked).reshape(ch, cw)
        masked[b] = np.kron(sm, np.ones((t, t), dtype=bool))
    return rows, cols, masked


def assemble_encoder_input(patch_embeddings: torch.Tensor, plans: MaskPlan | Sequence[MaskPlan],
                           mask_token: torch.Tensor | None = None) -> torch.Tensor:
    """Pack kept patches onto the half-resolution grid and substitute secondarily masked ones.

    ``patch_embeddings`` is B x (grid_h*t) x (grid_w*t) x C: each patch covers a t x t block of
    tokens (t=1 for patch-level embeddings, t=patch_size for raw pixels).  Returns
    B x (grid_h/2*t) x (grid_w/2*t) x C.
    """
    if isinstance(plans, MaskPlan):
        plans = [plans] * patch_embeddings.shape[0]
    if len(plans) != patch_embeddings.shape[0]:
        raise ValueError(f"{len(plans)} plans for a batch of {patch_embeddings.shape[0]}")
    B, H, W, C = patch_embeddings.shape
    gh, gw = plans[0].grid_h, plans[0].grid_w
    if H % gh or W % gw or H // gh != W // gw:
        raise ValueError(f"token map {H}x{W} does not tile a {gh}x{gw} patch grid")
    t = H // gh
    rows, cols, masked = _compact_index(plans, t)
    b_idx = torch.arange(B)[:, None, None]
    out = patch_embeddings[b_idx, torch.from_numpy(rows), torch.from_numpy(cols)]
    if mask_token is not None and masked.any():
        out = torch.where(torch.from_numpy(masked)[..., None], mask_token.to(out.dtype), out)
    return out


# --- pixel shuffle -------------------------------------------------------------

def pixel_shuffle_upsample(latent: torch.Tensor, r: int) -> torch.Tensor:
    """B x (r*r*C) x h x w -> B x C x (r*h) x (r*w); out[b,c,r*i+di,r*j+dj] = in[b,c*r*r+di*r+dj,i,j]."""
    B, Crr, h, w = latent.shape
    if r < 1 or Crr % (r * r):
        raise ValueError(f"{Crr} channels not divisible by r^2 = {r * r}")
    C = Crr // (r * r)
    x = latent.reshape(B, C, r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(B, C, h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle_upsample`."""
    B, C, H, W = x.shape
    if H % r or W % r:
        raise ValueError(f"spatial size {H}x{W} not divisible by {r}")
    x = x.reshape(B, C, H // r, r, W // r, r).permute(0, 1, 3, 5, 2, 4)
    return x.reshape(B, C * r * r, H // r, W // r)


# --- reconstruction ------------------------------------------------------------

@dataclass
class ReconTarget:
    target_pixels: torch.Tensor | np.ndarray
    predicted_pixels: torch.Tensor | np.ndarray

    @property
    def n_missing(self) -> int:
        return int(np.prod(self.target_pixels.shape))


def mae_loss(target: ReconTarget):
    """Mean squared error over the missing pixel values."""
    y, y_hat = target.target_pixels, target.predicted_pixels
    if tuple(y.shape) != tuple(y_hat.shape):
        raise ValueError(f"target {tuple(y.shape)} and prediction {tuple(y_hat.shape)} differ")
    if target.n_missing == 0:
        raise ValueError("no missing pixels: nothing to reconstruct")
    return ((y - y_hat) ** 2).sum() / target.n_missing


@pdataclass(config=ConfigDict(extra="forbid", frozen=True))
class DecoderConfig:
    depth: int = 1
    dim: int = 64
    heads: int = 4
    upsample_factor: int = 2


class DecoderBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 4 * dim)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class UniformMaskedAutoencoder(nn.Module):
    def __init__(self, encoder_config: PyramidEncoderConfig, decoder_config: DecoderConfig):
        super().__init__()
        ps = encoder_config.patch_size
        if TOTAL_STRIDE // ps != decoder_config.upsample_factor:
            raise ValueError(
                f"upsample factor {decoder_config.upsample_factor} does not restore the kept-patch grid "
                f"(encoder stride {TOTAL_STRIDE} over patch size {ps} needs {TOTAL_STRIDE // ps})"
            )
        if decoder_config.dim % decoder_config.heads or decoder_config.dim % 4:
            raise ValueError("decoder dim must be divisible by its heads and by 4")
        self.encoder = PyramidEncoder(encoder_config)
        self.decoder_config = decoder_config
        self.patch_size = ps
        r = decoder_config.upsample_factor
        d = decoder_config.dim
        self.latent_proj = nn.Conv2d(encoder_config.out_dim, r * r * d, kernel_size=1)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(DecoderBlock(d, decoder_config.heads) for _ in range(decoder_config.depth))
        self.norm = nn.LayerNorm(d)
        self.pred = nn.Linear(d, ps * ps * encoder_config.in_chans)
        nn.init.normal_(self.mask_token, std=0.02)
        for m in (self.latent_proj, self.blocks, self.norm, self.pred):
            m.apply(_init_transformer_weights)

    def grid_shape(self, x: torch.Tensor) -> tuple[int, int]:
        H, W = x.shape[-2:]
        ps = self.patch_size
        if H % (2 * TOTAL_STRIDE) or W % (2 * TOTAL_STRIDE):
            raise ValueError(f"pretraining input {H}x{W} must be divisible by {2 * TOTAL_STRIDE}")
        return H // ps, W // ps

    def encode(self, x: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        tokens = self.encoder.embed(x)  # B x H/4 x W/4 x C1
        pos = self.encoder.pos_embed(tokens.shape[1], tokens.shape[2]).expand_as(tokens)
        compact = assemble_encoder_input(tokens, plans, self.encoder.mask_token)
        compact = compact + assemble_encoder_input(pos, plans)
        return self.encoder.encode_tokens(compact)

    def decode(self, latent: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        """Latent map -> per-patch pixel predictions, B x (gh*gw) x (ps*ps*3)."""
        gh, gw = plans[0].grid_h, plans[0].grid_w
        x = pixel_shuffle_upsample(self.latent_proj(latent), self.decoder_config.upsample_factor)
        B, d = x.shape[:2]
        kept_latent = x.flatten(2).transpose(1, 2)  # B x (gh/2*gw/2) x d, cell order
        full = self.mask_token.expand(B, gh * gw, d).clone()
        kept = torch.from_numpy(np.stack([p.kept for p in plans]))
        full.scatter_(1, kept[..., None].expand(-1, -1, d), kept_latent)
        full = full + grid_pos_embed(d, gh, gw).reshape(1, gh * gw, d).to(full.dtype)
        for blk in self.blocks:
            full = blk(full)
        return self.pred(self.norm(full))

    def forward(self, x: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        """Reconstructed image, same shape as ``x``."""
        return self.unpatchify(self.decode(self.encode(x, plans), plans), x.shape)

    def patchify(self, x):
        B, C, H, W = x.shape
        ps = self.patch_size
        x = x.reshape(B, C, H // ps, ps, W // ps, ps).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(B, (H // ps) * (W // ps), ps * ps * C)

    def unpatchify(self, patches, shape):
        B, C, H, W = shape
        ps = self.patch_size
        x = patches.reshape(B, H // ps, W // ps, ps, ps, C).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(B, C, H, W)


def missing_patch_mask(plans: Sequence[MaskPlan], scope: str = "missing") -> np.ndarray:
    """B x gh x gw mask of patches entering the loss."""
    if scope == "missing":
        return np.stack([~p.visible() for p in plans])
    if scope == "dropped-only":
        return np.stack([p.dropped() for p in plans])
    raise ValueError(f"unknown loss scope {scope!r}")


def reconstruction_target(model: UniformMaskedAutoencoder, images: torch.Tensor, recon: torch.Tensor,
                          plans: Sequence[MaskPlan], scope: str = "missing") -> ReconTarget:
    sel = torch.from_numpy(missing_patch_mask(plans, scope).reshape(len(plans), -1))
    return ReconTarget(model.patchify(images)[sel], model.patchify(recon)[sel])


# --- training loop ---------------------------------------------------------------

@pdataclass(config=ConfigDict(extra="forbid", frozen=True))
class PretrainSettings:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    batch_size: int = 32
    effective_batch_size: int = 32  # gradient accumulation reaches this
    epochs: int = 100
    max_steps: int | None = None
    sm_ratio: float = 0.25
    loss_scope: Literal["missing", "dropped-only"] = "missing"
    save_every: int = 100

    @property
    def accumulation(self) -> int:
        if self.effective_batch_size % self.batch_size:
            raise ValueError("effective_batch_size must be a multiple of batch_size")
        return self.effective_batch_size // self.batch_size


FULL_PRETRAIN = PretrainSettings(batch_size=256, effective_batch_size=1024, epochs=100)


def _batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def _step_plans(batch: int, grid, ratio, seed: int, step: int, micro: int) -> list[MaskPlan]:
    return make_plans(batch, grid[0], grid[1], ratio, np.random.default_rng([seed, 1, step, micro]))


def _checkpoint_header(model, settings, step, seed, dataset_name):
    return {
        "kind": "pretrain",
        "encoder": config_dict(model.encoder.config),
        "decoder": config_dict(model.decoder_config),
        "settings": config_dict(settings),
        "step": step,
        "seed": seed,
        "dataset": dataset_name,
    }


def pretrain_loop(dataset, encoder_config: PyramidEncoderConfig, decoder_config: DecoderConfig,
                  settings: PretrainSettings, seed: int, out: Path | str | None = None,
                  resume: Path | str | None = None, log_path: Path | str | None = None):
    """AdamW masked-reconstruction training; returns ``(model, losses)``.

    Batch order and masks are pure functions of ``(seed, epoch, step)``, so resuming from a
    checkpoint replays exactly the steps an uninterrupted run would take.
    """
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    if len(images) == 0:
        raise ValueError("empty pretraining dataset")
    torch.manual_seed(seed)
    model = UniformMaskedAutoencoder(encoder_config, decoder_config)
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr, betas=settings.betas,
                            weight_decay=settings.weight_decay)
    step = 0
    losses: list[float] = []
    if resume is not None:
        state, header = load_checkpoint(resume)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        step = header["step"]
        losses = list(state.get("losses", []))

    accum = settings.accumulation
    bs = min(settings.batch_size, len(images))
    per_epoch = max(len(images) // (bs * accum), 1)
    total = settings.max_steps if settings.max_steps is not None else settings.epochs * per_epoch
    grid = model.grid_shape(to_nchw(images[:1]))
    out = Path(out) if out is not None else None
    log_rows = [(i, l, settings.lr) for i, l in enumerate(losses)]

    def save(at_step):
        if out is None:
            return
        save_checkpoint(out, {"model": model.state_dict(), "optimizer": opt.state_dict(), "losses": losses},
                        _checkpoint_header(model, settings, at_step, seed, getattr(dataset, "name", None)))

    model.train()
    while step < total:
        epoch, slot = divmod(step, per_epoch)
        order = _batch_order(len(images), seed, epoch)
        opt.zero_grad()
        step_loss = 0.0
        for micro in range(accum):
            start = ((slot * accum + micro) * bs) % len(images)
            idx = order[start:start + bs]
            x = to_nchw(images[idx])
            plans = _step_plans(len(idx), grid, settings.sm_ratio, seed, step, micro)
            recon = model(x, plans)
            loss = mae_loss(reconstruction_target(model, x, recon, plans, settings.loss_scope))
            if not torch.isfinite(loss):
                save(step)
                raise TrainingDiverged(f"non-finite loss at step {step}; last finite state saved to {out}")
            (loss / accum).backward()
            step_loss += loss.item() / accum
        opt.step()
        losses.append(step_loss)
        log_rows.append((step, step_loss, opt.param_groups[0]["lr"]))
        step += 1
        if step % settings.save_every == 0 or step == total:
            save(step)
            log.info("pretrain step %d/%d loss %.5f", step, total, step_loss)

    if log_path is not None:
        write_loss_csv(log_path, log_rows)
    return model, losses


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        w.writerows(rows)


def dump_reconstructions(model: UniformMaskedAutoencoder, images: np.ndarray, out_dir: Path | str,
                         seed: int = 0, sm_ratio: float = 0.25) -> list[Path]:
    """Save (original, masked input, reconstruction) PNG triplets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = to_nchw(images)
    plans = make_plans(len(x), *model.grid_shape(x), sm_ratio, np.random.default_rng(seed))
    model.eval()
    with torch.no_grad():
        recon = model(x, plans).clamp(0, 1)
    ps = model.patch_size
    written = []
    for i, p in enumerate(plans):
        vis = np.kron(p.visible(), np.ones((ps, ps)))[..., None]
        orig = images[i]
        masked = orig * vis
        rec = recon[i].permute(1, 2, 0).numpy()
        strip = np.concatenate([orig, masked, rec], axis=1)
        path = out_dir / f"recon_{i:03d}.png"
        Image.fromarray((strip * 255).round().astype(np.uint8)).save(path)
        written.append(path)
    return written
