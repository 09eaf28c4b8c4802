"""Cortex masks and mask-aware patch tokenization.

Tokens are ordered row-major over the patch grid; only kept patches are
emitted. Functions accept numpy arrays or torch tensors with any number of
leading batch dimensions.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
from einops import rearrange
from scipy.ndimage import gaussian_filter

from .errors import InvalidConfig, ShapeMismatch

KEEP_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class CortexMask:
    """Active-pixel mask plus the list of retained patches.

    ``active`` is the effective mask: pixels that fall inside a dropped patch
    are switched off, so every active pixel is representable by a token.
    """

    active: np.ndarray
    patch_size: int
    kept_patches: np.ndarray
    keep_threshold: float = KEEP_THRESHOLD
    _torch_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self):
        return self.active.shape

    @property
    def grid(self):
        h, w = self.active.shape
        return h // self.patch_size, w // self.patch_size

    @property
    def n_tokens(self):
        return len(self.kept_patches)

    @property
    def token_dim(self):
        return self.patch_size ** 2

    @property
    def n_active(self):
        return int(self.active.sum())

    def torch_active(self, dtype=torch.float32):
        key = ("active", dtype)
        if key not in self._torch_cache:
            self._torch_cache[key] = torch.as_tensor(self.active, dtype=dtype)
        return self._torch_cache[key]

    def ref(self):
        """Short stable identifier for serialization headers."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.packbits(self.active).tobytes())
        h.update(np.asarray(self.kept_patches, dtype=np.int64).tobytes())
        h.update(str(self.patch_size).encode())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, CortexMask):
            return NotImplemented
        return (
            self.patch_size == other.patch_size
            and np.array_equal(self.active, other.active)
            and np.array_equal(self.kept_patches, other.kept_patches)
        )


def _patch_fraction(active, patch_size):
    h, w = active.shape
    blocks = active.reshape(h // patch_size, patch_size, w // patch_size, patch_size)
    return blocks.mean(axis=(1, 3)).reshape(-1)


def mask_from_active(active, patch_size, keep_threshold=KEEP_THRESHOLD):
    active = np.asarray(active, dtype=bool)
    h, w = active.shape
    if h % patch_size or w % patch_size:
        raise InvalidConfig(f"grid {h}x{w} not divisible by patch_size {patch_size}")
    frac = _patch_fraction(active, patch_size)
    kept = np.flatnonzero(frac >= keep_threshold)
    if kept.size == 0:
        raise InvalidConfig("mask keeps zero patches")
    keep_grid = np.zeros(frac.shape, dtype=bool)
    keep_grid[kept] = True
    gh, gw = h // patch_size, w // patch_size
    keep_pix = np.repeat(np.repeat(keep_grid.reshape(gh, gw), patch_size, 0), patch_size, 1)
    return CortexMask(active & keep_pix, patch_size, kept, keep_threshold)


def make_mask(height, width, coverage, patch_size, seed, keep_threshold=KEEP_THRESHOLD):
    """Blob-shaped synthetic cortex mask covering roughly ``coverage`` of the grid."""
    if not 0.0 < coverage <= 1.0:
        raise InvalidConfig(f"coverage must be in (0, 1], got {coverage}")
    if height % patch_size or width % patch_size:
        raise InvalidConfig(f"grid {height}x{width} not divisible by patch_size {patch_size}")
    if coverage >= 1.0:
        active = np.ones((height, width), dtype=bool)
    else:
        rng = np.random.default_rng(seed)
        field_ = gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 6, mode="wrap")
        cut = np.quantile(field_, 1.0 - coverage)
        active = field_ > cut
    return mask_from_active(active, patch_size, keep_threshold)


def _check_map(values, mask):
    if tuple(values.shape[-2:]) != tuple(mask.shape):
        raise ShapeMismatch(f"map shape {tuple(values.shape[-2:])} does not match mask {mask.shape}")


def patchify(values, mask):
    """(..., H, W) -> (..., n_kept, patch_size**2)."""
    _check_map(values, mask)
    p = mask.patch_size
    tokens = rearrange(values, "... (gh p1) (gw p2) -> ... (gh gw) (p1 p2)", p1=p, p2=p)
    idx = mask.kept_patches
    if isinstance(tokens, torch.Tensor):
        idx = torch.as_tensor(idx, device=tokens.device)
    return tokens[..., idx, :]


def unpatchify(tokens, mask):
    """(..., n_kept, patch_size**2) -> (..., H, W); dropped and masked pixels are 0."""
    p = mask.patch_size
    if tokens.shape[-2] != mask.n_tokens or tokens.shape[-1] != p * p:
        raise ShapeMismatch(
            f"expected (..., {mask.n_tokens}, {p * p}) tokens, got {tuple(tokens.shape)}"
        )
    gh, gw = mask.grid
    lead = tuple(tokens.shape[:-2])
    if isinstance(tokens, torch.Tensor):
        full = tokens.new_zeros(lead + (gh * gw, p * p))
        full[..., torch.as_tensor(mask.kept_patches), :] = tokens
        out = rearrange(full, "... (gh gw) (p1 p2) -> ... (gh p1) (gw p2)", gh=gh, p1=p)
        return out * mask.torch_active(out.dtype).to(out.device)
    full = np.zeros(lead + (gh * gw, p * p), dtype=np.asarray(tokens).dtype)
    full[..., mask.kept_patches, :] = tokens
    out = rearrange(full, "... (gh gw) (p1 p2) -> ... (gh p1) (gw p2)", gh=gh, p1=p)
    return out * mask.active


def apply_mask(values, mask):
    _check_map(values, mask)
    if isinstance(values, torch.Tensor):
        return values * mask.torch_active(values.dtype).to(values.device)
    return values * mask.active
