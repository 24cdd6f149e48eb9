"""Small shared helpers: seeding, image metrics, thread capping."""

from __future__ import annotations

import hashlib
import os

import torch


def derive_seed(master: int, *tags) -> int:
    """Derive a stable 63-bit stream seed from a master seed and tag tuple.

    Hash-based so distinct (master, tags) pairs never collide by accident
    and the derivation is identical across platforms and runs.
    """
    text = repr((int(master),) + tuple(tags)).encode()
    digest = hashlib.blake2b(text, digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """PSNR in dB between two images with values in [0, peak]."""
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse <= 0.0:
        return float("inf")
    return 10.0 * torch.log10(torch.tensor(peak * peak / mse)).item()


def apply_thread_cap() -> None:
    """Honor the CIT3D_THREADS env var as an upper bound on worker threads."""
    cap = os.environ.get("CIT3D_THREADS")
    if cap:
        try:
            n = max(1, int(cap))
        except ValueError:
            return
        torch.set_num_threads(min(torch.get_num_threads(), n))


def set_deterministic(flag: bool) -> None:
    """Pin reductions to a deterministic order (single worker, strict kernels)."""
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
