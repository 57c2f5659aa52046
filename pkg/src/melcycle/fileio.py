"""Bit-exact file formats: the spectrogram container and pairing manifests.

Spectrogram container (little-endian):

    magic  8 bytes  b"MELSPEC1"
    u32    format version (1)
    u32    Q (mel bins)
    u64    T (frames)
    u32    sample_rate
    u32    hop
    u32    window
    f64*   Q*T row-major values
    [u32 + utf-8 JSON]  optional tool/config echo appended after the payload

Readers that stop after the payload parse files from any writer of the
prefix layout; our writer always appends the echo.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import __version__
from .audio import DataError, MelSpectrogram

SPEC_MAGIC = b"MELSPEC1"
SPEC_VERSION = 1


def save_spectrogram(m: MelSpectrogram, path, echo: dict | None = None) -> None:
    q, t = m.data.shape
    parts = [
        SPEC_MAGIC,
        struct.pack("<IIQIII", SPEC_VERSION, q, t, m.sample_rate, m.hop, m.window),
        np.ascontiguousarray(m.data, dtype="<f8").tobytes(),
    ]
    blob = dict(echo or {})
    blob.setdefault("tool_version", __version__)
    echo_b = json.dumps(blob, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(echo_b)))
    parts.append(echo_b)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_spectrogram(path) -> MelSpectrogram:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read spectrogram {path}: {exc}") from exc
    head = len(SPEC_MAGIC)
    if buf[:head] != SPEC_MAGIC:
        raise DataError(f"{path} is not a spectrogram file")
    version, q, t, rate, hop, window = struct.unpack_from("<IIQIII", buf, head)
    if version != SPEC_VERSION:
        raise DataError(f"unsupported spectrogram version {version} in {path}")
    offset = head + struct.calcsize("<IIQIII")
    count = q * t
    if len(buf) < offset + count * 8:
        raise DataError(f"spectrogram {path} is truncated")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(q, t)
    return MelSpectrogram(data.copy(), mel_bins=q, hop=hop, window=window, sample_rate=rate)


def read_spectrogram_echo(path) -> dict | None:
    """The trailing JSON echo, if the writer appended one."""
    with open(path, "rb") as fh:
        buf = fh.read()
    head = len(SPEC_MAGIC)
    _, q, t, *_ = struct.unpack_from("<IIQIII", buf, head)
    offset = head + struct.calcsize("<IIQIII") + q * t * 8
    if len(buf) < offset + 4:
        return None
    (n,) = struct.unpack_from("<I", buf, offset)
    return json.loads(buf[offset + 4 : offset + 4 + n].decode())


def load_manifest(path) -> list[tuple[str, str]]:
    """Lines of `converted_path<TAB>target_path`; '#' comments allowed."""
    entries = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected `converted<TAB>target`")
                entries.append((parts[0], parts[1]))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not entries:
        raise DataError(f"manifest {path} lists no utterance pairs")
    return entries
