"""8-bit grayscale image files: binary PGM (P5) and PNG.

Images live in memory as 2-D float32 arrays with values in [0, 1].
PGM is parsed by hand; PNG decoding and encoding goes through Pillow.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


class ImageError(ValueError):
    """Image file could not be decoded."""


class ImageFormatError(ImageError):
    """Malformed or unrecognized header."""


class UnsupportedImageError(ImageError):
    """Well-formed file in a variant we do not read (bit depth, mode)."""


class TruncatedImageError(ImageError):
    """Pixel data ends early."""


def _parse_pgm(data: bytes) -> np.ndarray:
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("PGM header ends early")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise ImageFormatError(f"non-numeric PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid PGM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedImageError(f"PGM maxval {maxval} not supported (only 8-bit, maxval 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PGM maxval")
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise TruncatedImageError(f"PGM pixel data truncated: {len(data) - pos} of {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width)


def _parse_png(data: bytes) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(io.BytesIO(data)) as im:
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise UnsupportedImageError(f"PNG mode {mode!r} not supported (need 8-bit gray or RGB)")
            im.load()
            arr = np.asarray(im)
    except UnsupportedImageError:
        raise
    except (OSError, SyntaxError) as exc:
        msg = str(exc)
        if "truncated" in msg.lower() or "eof" in msg.lower():
            raise TruncatedImageError(f"PNG data truncated: {msg}") from None
        raise ImageFormatError(f"malformed PNG: {msg}") from None
    if mode == "RGB":
        rgb = arr.astype(np.float64)
        return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return arr


def load_gray(path: str | Path) -> np.ndarray:
    """Decode a P5 PGM or 8-bit PNG into an (H, W) float32 array in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        pixels = _parse_pgm(data)
    elif data[:8] == PNG_SIGNATURE:
        pixels = _parse_png(data)
    else:
        raise ImageFormatError(f"{path}: not a P5 PGM or PNG file")
    return (np.asarray(pixels, dtype=np.float64) / 255.0).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round to 8-bit."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    q = quantize(img)
    if q.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {q.shape}")
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def save_gray(img: np.ndarray, path: str | Path) -> None:
    """Write ``img`` as 8-bit grayscale; ``.png`` selects PNG, anything else PGM."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(quantize(img)).save(path, format="PNG")
    else:
        path.write_bytes(encode_pgm(img))
