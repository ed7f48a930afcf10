"""Image and point-cloud emitters plus the evaluation metrics.

Images are written as binary PPM (P6, maxval 255, rounding half-up) or PNG
when the path ends in .png; point clouds as ASCII PLY with one vertex per
valid return.  All emitters are deterministic for fixed inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] float image to u8 with round-half-up."""
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w = img.shape[:2]
    data = quantize(img) if img.dtype != np.uint8 else img
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """PPM to float image in [0, 1]."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pix.reshape(h, w, 3).astype(np.float64) / maxval


def write_image(path, img: np.ndarray) -> None:
    """PPM by default; PNG via Pillow when the extension asks for it."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(quantize(img)).save(path)
    else:
        write_ppm(path, img)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"))
    return arr.astype(np.float64) / 255.0


def write_ply(path, points: np.ndarray) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x", "property float y", "property float z",
        "end_header",
    ]
    body = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in points]
    Path(path).write_text("\n".join(lines + body) + "\n", encoding="ascii")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n = 0
    body_at = 0
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.strip() == "end_header":
            body_at = i + 1
            break
    pts = [tuple(float(v) for v in row.split()[:3]) for row in text[body_at:body_at + n]]
    return np.array(pts, dtype=np.float64).reshape(n, 3)


# -- metrics ------------------------------------------------------------------


def mean_l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) on [0, 1] images; +inf for identical inputs."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def ssim(pred: np.ndarray, gt: np.ndarray, *, k1: float = 0.01, k2: float = 0.03) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), valid-region mean."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    kern = _gaussian_kernel()
    pad = len(kern) // 2
    c1, c2 = k1**2, k2**2

    def smooth(img):
        out = correlate1d(img, kern, axis=0, mode="constant")
        return correlate1d(out, kern, axis=1, mode="constant")

    vals = []
    for c in range(pred.shape[2]):
        a, b = pred[..., c], gt[..., c]
        mu_a, mu_b = smooth(a), smooth(b)
        var_a = smooth(a * a) - mu_a**2
        var_b = smooth(b * b) - mu_b**2
        cov = smooth(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        smap = (num / den)[pad:-pad, pad:-pad]
        vals.append(smap.mean())
    return float(np.mean(vals))


def median_range_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Median |delta range| over rays where both have valid returns."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.isfinite(pred) & np.isfinite(gt)
    if not np.any(valid):
        return float("nan")
    return float(np.median(np.abs(pred[valid] - gt[valid])))


def image_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    return {"mean_l1": mean_l1(pred, gt), "psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt)}
