"""Scalar response models over normalised images.

A model maps an (H, W) float64 image to a scalar and supplies its own
per-pixel gradient. The optimisation loop never finite-differences a model.

Built-ins are the Gabor simple cell (rectified linear filter) and the
quadrature-pair energy complex cell, both scaled so that an image of L2 norm
``norm_budget`` gives a response of at most 1.
"""

from __future__ import annotations

import math
import os
import selectors
import shlex
import struct
import subprocess
import sys
import threading
from dataclasses import dataclass, replace

import numpy as np
import torch


class ModelError(RuntimeError):
    pass


class ResponseModel:
    """Subclasses implement ``evaluate``; ``respond`` may be overridden when cheaper."""

    def evaluate(self, img: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def respond(self, img: np.ndarray) -> float:
        return self.evaluate(img)[0]

    def respond_gradient(self, img: np.ndarray) -> np.ndarray:
        return self.evaluate(img)[1]

    def close(self) -> None:
        pass


@dataclass(frozen=True)
class GaborFilter:
    orientation: float = 0.0  # radians
    frequency: float = 0.08  # cycles / pixel
    phase: float = 0.0  # radians
    sigma: float = 8.0  # pixels
    center: tuple | None = None  # (x, y) in pixels; None -> (W // 2, H // 2)
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("gabor sigma must be > 0")
        vals = (self.orientation, self.frequency, self.phase, self.sigma, self.amplitude)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("gabor parameters must be finite")

    def with_phase(self, phase: float) -> "GaborFilter":
        return replace(self, phase=phase)


def make_gabor(params: GaborFilter, width: int, height: int) -> np.ndarray:
    """G(x, y) = A exp(-(x'^2 + y'^2) / 2 s^2) cos(2 pi f x' + phase), y pointing up."""
    cx, cy = params.center if params.center is not None else (width // 2, height // 2)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = cols - cx
    y = cy - rows
    c, s = math.cos(params.orientation), math.sin(params.orientation)
    xr = x * c + y * s
    yr = -x * s + y * c
    env = np.exp(-(xr**2 + yr**2) / (2.0 * params.sigma**2))
    return params.amplitude * env * np.cos(2.0 * math.pi * params.frequency * xr + params.phase)


class SimpleCell(ResponseModel):
    """r = max(0, <img, G>) / (budget * |G|). Subgradient at the kink is 0."""

    def __init__(self, gabor: GaborFilter, width: int, height: int, norm_budget: float = 25.0):
        self.gabor = gabor
        self.filter = make_gabor(gabor, width, height)
        self.norm_budget = float(norm_budget)
        fn = float(np.linalg.norm(self.filter))
        if fn == 0.0:
            raise ModelError("simple cell filter is identically zero")
        self._scale = 1.0 / (self.norm_budget * fn)

    def _check(self, img):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.filter.shape:
            raise ModelError(f"image shape {img.shape} does not match filter {self.filter.shape}")
        return img

    def drive(self, img) -> float:
        return float(np.sum(self._check(img) * self.filter)) * self._scale

    def respond(self, img) -> float:
        return max(0.0, self.drive(img))

    def evaluate(self, img):
        r = self.drive(img)
        if r > 0:
            return r, self.filter * self._scale
        return 0.0, np.zeros_like(self.filter)


class ComplexCell(ResponseModel):
    """Energy model over a quadrature pair: sqrt(<img,G1>^2 + <img,G2>^2) / (budget * |G1|)."""

    def __init__(self, gabor: GaborFilter, width: int, height: int, norm_budget: float = 25.0,
                 partner: GaborFilter | None = None):
        partner = partner if partner is not None else gabor.with_phase(gabor.phase + math.pi / 2)
        if replace(partner, phase=gabor.phase) != gabor:
            raise ModelError("quadrature filters must share every parameter except phase")
        if abs(partner.phase - gabor.phase - math.pi / 2) > 1e-9:
            raise ModelError(
                f"filters are not a quadrature pair: phase difference {partner.phase - gabor.phase!r}"
            )
        self.gabor = gabor
        self.g1 = make_gabor(gabor, width, height)
        self.g2 = make_gabor(partner, width, height)
        n1 = float(np.linalg.norm(self.g1))
        if n1 == 0.0:
            raise ModelError("complex cell filter is identically zero")
        self.norm_budget = float(norm_budget)
        self._scale = 1.0 / (self.norm_budget * n1)

    def projections(self, img) -> tuple[float, float]:
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.g1.shape:
            raise ModelError(f"image shape {img.shape} does not match filter {self.g1.shape}")
        return float(np.sum(img * self.g1)), float(np.sum(img * self.g2))

    def respond(self, img) -> float:
        a, b = self.projections(img)
        return math.hypot(a, b) * self._scale

    def evaluate(self, img):
        a, b = self.projections(img)
        e = math.hypot(a, b)
        if e == 0.0:
            return 0.0, np.zeros_like(self.g1)
        return e * self._scale, (a * self.g1 + b * self.g2) * (self._scale / e)


def dominant_phase(img, gabor: GaborFilter) -> float:
    """Phase (radians, in (-pi, pi]) of the best-matching Gabor in a phase-swept bank.

    Projection onto the cos/sin pair is the continuous limit of sweeping the
    phase and taking the argmax.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    c = float(np.sum(img * make_gabor(gabor.with_phase(0.0), w, h)))
    s = float(np.sum(img * make_gabor(gabor.with_phase(math.pi / 2), w, h)))
    # <img, G(p)> = c cos p + s sin p, maximised at p = atan2(s, c)
    return math.atan2(s, c)


# ---------------------------------------------------------------- external models

_HEADER = struct.Struct("<II")


def pack_image(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    return _HEADER.pack(w, h) + img.astype("<f8").tobytes(order="C")


def unpack_image(data: bytes) -> np.ndarray:
    w, h = _HEADER.unpack_from(data)
    n = w * h
    payload = data[_HEADER.size : _HEADER.size + 8 * n]
    if len(payload) != 8 * n:
        raise ModelError(f"image payload truncated: expected {8 * n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(h, w)


def pack_response(response: float, gradient: np.ndarray) -> bytes:
    return struct.pack("<d", response) + np.asarray(gradient, dtype="<f8").tobytes(order="C")


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def serve_stdio(evaluate, stdin=None, stdout=None) -> None:
    """Answer requests on binary stdio until EOF. ``evaluate(img) -> (r, grad)``."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        head = _read_exact(stdin, _HEADER.size)
        if len(head) < _HEADER.size:
            return
        w, h = _HEADER.unpack(head)
        body = _read_exact(stdin, 8 * w * h)
        img = np.frombuffer(body, dtype="<f8").reshape(h, w)
        r, g = evaluate(img)
        stdout.write(pack_response(float(r), g))
        stdout.flush()


class ExternalModel(ResponseModel):
    """Response model served by a subprocess over binary stdin/stdout.

    Request: uint32 width, uint32 height (little-endian), then width*height
    float64 pixels row-major. Reply: float64 response, then the same number
    of float64 gradient values. One request in flight at a time.
    """

    def __init__(self, command, timeout: float = 60.0, cwd=None):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE, cwd=cwd
            )
        except OSError as exc:
            raise ModelError(f"cannot start external model {self.argv!r}: {exc}") from exc
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._proc.stdout, selectors.EVENT_READ)

    def _recv(self, n: int) -> bytes:
        fd = self._proc.stdout.fileno()
        buf = bytearray()
        while len(buf) < n:
            if not self._sel.select(self.timeout):
                raise ModelError(f"external model timed out after {self.timeout}s")
            chunk = os.read(fd, n - len(buf))
            if not chunk:
                err = self._proc.stderr.read().decode(errors="replace") if self._proc.poll() is not None else ""
                raise ModelError(f"external model closed its output after {len(buf)}/{n} bytes. {err}".strip())
            buf += chunk
        return bytes(buf)

    def evaluate(self, img):
        img = np.asarray(img, dtype=np.float64)
        with self._lock:
            if self._proc.poll() is not None:
                raise ModelError(f"external model exited with code {self._proc.returncode}")
            try:
                self._proc.stdin.write(pack_image(img))
                self._proc.stdin.flush()
            except BrokenPipeError as exc:
                raise ModelError("external model closed its input") from exc
            raw = self._recv(8 + 8 * img.size)
        r = struct.unpack_from("<d", raw)[0]
        grad = np.frombuffer(raw[8:], dtype="<f8").astype(np.float64).reshape(img.shape)
        if not math.isfinite(r):
            raise ModelError(f"external model returned non-finite response {r!r}")
        if not np.all(np.isfinite(grad)):
            raise ModelError("external model returned a non-finite gradient")
        return r, grad

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._sel.close()
        for s in (self._proc.stdout, self._proc.stderr):
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------- torch bridge


class _ModelResponse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, img, model):
        r, g = model.evaluate(img.detach().numpy())
        if not math.isfinite(r):
            raise ModelError(f"model returned non-finite response {r!r}")
        ctx.save_for_backward(torch.from_numpy(np.array(g, dtype=np.float64)))
        return img.new_tensor(r)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out * g, None


def model_response(img: torch.Tensor, model: ResponseModel) -> torch.Tensor:
    """Scalar tensor f(img) whose backward pass uses the model's own gradient."""
    return _ModelResponse.apply(img, model)
