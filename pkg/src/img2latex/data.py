"""Tokenization, vocabulary, PGM image I/O, manifests and bucketing.

File formats (all plain text or PGM):
  manifest  one example per line, `relative/path.pgm<TAB>tok tok tok`
  lexicon   one backslash command per line
  buckets   one `W H` pair per line, width first, multiples of 8
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
START_ID = 2
END_ID = 3
RESERVED = ("<PAD>", "<UNK>", "<START>", "<END>")


class DataError(Exception):
    pass


# ---------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------

# backslash commands the synthetic grammar emits; real corpora supply
# their own lexicon file
DEFAULT_LEXICON = ("\\frac",)


def tokenize(latex: str, mode: str = "lexicon", lexicon=None) -> list[str]:
    """Split a LaTeX string into tokens.

    chars mode: one token per non-space character.  lexicon mode:
    greedy longest match of backslash commands from the lexicon, single
    characters otherwise.  Whitespace only delimits.
    """
    if mode == "chars":
        return [ch for ch in latex if not ch.isspace()]
    if mode != "lexicon":
        raise DataError(f"unknown tokenize mode '{mode}' (chars or lexicon)")
    commands = sorted(lexicon if lexicon is not None else DEFAULT_LEXICON,
                      key=len, reverse=True)
    tokens: list[str] = []
    i = 0
    while i < len(latex):
        ch = latex[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "\\":
            match = next((c for c in commands if latex.startswith(c, i)), None)
            if match is not None:
                tokens.append(match)
                i += len(match)
                continue
            log.warning("no lexicon match for backslash at position %d in %r; "
                        "emitting single characters", i, latex)
        tokens.append(ch)
        i += 1
    return tokens


def detokenize(tokens, mode: str = "lexicon") -> str:
    """Inverse of tokenize: space-join (lexicon) or concatenate (chars)."""
    if mode == "chars":
        return "".join(tokens)
    if mode != "lexicon":
        raise DataError(f"unknown tokenize mode '{mode}' (chars or lexicon)")
    return " ".join(tokens)


def load_lexicon(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        entries = [line.strip() for line in f if line.strip()]
    bad = [e for e in entries if not e.startswith("\\")]
    if bad:
        raise DataError(f"{path}: lexicon entries must start with a backslash: {bad[:3]}")
    return entries


class Vocabulary:
    """Token text <-> id map with the four reserved ids pinned first."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise DataError(f"vocabulary must begin with {RESERVED}, got {tokens[:4]}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_corpus(cls, sequences) -> "Vocabulary":
        distinct = sorted({t for seq in sequences for t in seq} - set(RESERVED))
        return cls(list(RESERVED) + distinct)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        """Ids back to token text, dropping the reserved sentinels."""
        return [self.tokens[i] for i in ids if i >= len(RESERVED)]


def build_vocab(manifests) -> Vocabulary:
    """Vocabulary over all token sequences in the given manifests."""
    sequences = []
    for path in manifests:
        sequences.extend(tokens for _, tokens in load_manifest(path))
    return Vocabulary.from_corpus(sequences)


# ---------------------------------------------------------------------
# PGM image I/O
# ---------------------------------------------------------------------

class PgmError(DataError):
    pass


def _pgm_scan(data: bytes, pos: int, path) -> tuple[bytes, int]:
    """Next whitespace-delimited field, skipping # comments; returns (field, new pos)."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PgmError(f"{path}: unexpected end of header at byte offset {pos}")
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """PGM file -> (integer array (H, W), maxval).  Accepts P2 and P5."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _pgm_scan(data, 0, path)
    if magic not in (b"P2", b"P5"):
        raise PgmError(f"{path}: bad magic {magic!r} at byte offset 0 (want P2 or P5)")
    fields = []
    for _ in range(3):
        field, pos = _pgm_scan(data, pos, path)
        if not field.isdigit():
            raise PgmError(f"{path}: non-numeric header field {field!r} at byte offset {pos - len(field)}")
        fields.append(int(field))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmError(f"{path}: non-positive dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise PgmError(f"{path}: maxval {maxval} out of range [1, 65535]")
    count = width * height
    if magic == b"P5":
        pos += 1   # exactly one whitespace byte after maxval
        itemsize = 1 if maxval < 256 else 2
        need = count * itemsize
        raster = data[pos:pos + need]
        if len(raster) != need:
            raise PgmError(f"{path}: raster truncated at byte offset {pos + len(raster)} "
                           f"(want {need} bytes)")
        dt = np.uint8 if itemsize == 1 else np.dtype(">u2")
        pixels = np.frombuffer(raster, dtype=dt).astype(np.int64)
        if pos + need != len(data):
            raise PgmError(f"{path}: trailing bytes after raster at offset {pos + need}")
    else:
        vals = []
        while len(vals) < count:
            field, pos = _pgm_scan(data, pos, path)
            if not field.isdigit():
                raise PgmError(f"{path}: non-numeric sample {field!r} at byte offset {pos - len(field)}")
            vals.append(int(field))
        pixels = np.array(vals, dtype=np.int64)
    if pixels.max(initial=0) > maxval:
        raise PgmError(f"{path}: sample value {pixels.max()} exceeds maxval {maxval}")
    return pixels.reshape(height, width), maxval


def read_pgm(path) -> np.ndarray:
    """PGM file -> float64 array in [0, 1] (1 = white background)."""
    pixels, maxval = read_pgm_raw(path)
    return pixels.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, maxval: int = 255,
              comments=(), binary: bool = True) -> None:
    """Write a [0, 1] grayscale array as PGM (P5 by default, P2 otherwise)."""
    if image.ndim != 2 or image.size == 0:
        raise PgmError(f"write_pgm: need a non-empty 2-D image, got shape {image.shape}")
    if not 0 < maxval < 65536:
        raise PgmError(f"write_pgm: maxval {maxval} out of range [1, 65535]")
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * maxval), 0, maxval).astype(np.int64)
    h, w = q.shape
    header = [b"P5" if binary else b"P2"]
    header.extend(("# " + c).encode("ascii") for c in comments)
    header.append(f"{w} {h}".encode("ascii"))
    header.append(str(maxval).encode("ascii"))
    with open(path, "wb") as f:
        f.write(b"\n".join(header) + b"\n")
        if binary:
            dt = np.uint8 if maxval < 256 else np.dtype(">u2")
            f.write(q.astype(dt).tobytes())
        else:
            f.write("\n".join(" ".join(str(v) for v in row) for row in q).encode("ascii"))
            f.write(b"\n")


# ---------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------

@dataclass
class Example:
    id: str                 # relative image path, doubles as the example id
    image: np.ndarray       # (H, W) float in [0, 1]
    tokens: list[str]


def load_manifest(path) -> list[tuple[str, list[str]]]:
    """Manifest lines -> [(relative image path, token list), ...]."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected TAB between path and tokens")
            rel, toks = line.split("\t", 1)
            out.append((rel, toks.split()))
    return out


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rel, tokens in entries:
            f.write(f"{rel}\t{' '.join(tokens)}\n")


def load_dataset(manifest_path) -> list[Example]:
    """Manifest + referenced PGM files -> in-memory examples."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    examples = []
    for rel, tokens in load_manifest(manifest_path):
        examples.append(Example(id=rel, image=read_pgm(os.path.join(base, rel)),
                                tokens=tokens))
    return examples


# ---------------------------------------------------------------------
# bucketing
# ---------------------------------------------------------------------

def load_buckets(path) -> list[tuple[int, int]]:
    """Bucket file -> [(width, height), ...], validated multiples of 8."""
    buckets = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise DataError(f"{path}:{lineno}: expected 'W H', got {line!r}")
            w, h = int(parts[0]), int(parts[1])
            if w % 8 or h % 8 or w == 0 or h == 0:
                raise DataError(f"{path}:{lineno}: bucket {w}x{h} must be positive multiples of 8")
            buckets.append((w, h))
    if not buckets:
        raise DataError(f"{path}: no buckets defined")
    return buckets


def assign_bucket(height: int, width: int, buckets) -> tuple[int, int] | None:
    """Smallest bucket (by area, then width) containing the image, or None."""
    fitting = [(bw * bh, bw, bh) for bw, bh in buckets if bw >= width and bh >= height]
    if not fitting:
        return None
    _, bw, bh = min(fitting)
    return bw, bh


def pad_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pad with white (1.0) on the bottom/right to the requested size."""
    h, w = image.shape
    if h > height or w > width:
        raise DataError(f"pad_image: image {h}x{w} larger than target {height}x{width}")
    out = np.ones((height, width), dtype=image.dtype)
    out[:h, :w] = image
    return out


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray            # (B, 1, H, W)
    token_rows: list[list[str]]
    seq: np.ndarray | None = None  # (B, T) int ids: [tokens END PAD...]

    def __len__(self) -> int:
        return len(self.ids)


def bucket_and_pad(examples, buckets, batch_size: int = 16,
                   vocab: Vocabulary | None = None,
                   allow_drop: bool = True) -> tuple[list[Batch], int]:
    """Group examples into same-bucket batches of at most batch_size.

    Images are padded white to their bucket; sequences (when a vocab is
    given) are encoded as ids, terminated with END and padded with PAD
    to the batch max.  Returns (batches, dropped_count); oversize images
    are dropped with a log line, or raise when allow_drop is false.
    Batch composition follows the input order, so shuffling the examples
    reshuffles the batches.
    """
    grouped: dict[tuple[int, int], list[tuple[Example, np.ndarray]]] = {}
    dropped = 0
    for ex in examples:
        h, w = ex.image.shape
        bucket = assign_bucket(h, w, buckets)
        if bucket is None:
            if not allow_drop:
                raise DataError(f"image {ex.id} ({h}x{w}) fits no bucket and dropping is disabled")
            dropped += 1
            continue
        bw, bh = bucket
        grouped.setdefault(bucket, []).append((ex, pad_image(ex.image, bh, bw)))
    if dropped:
        log.info("dropped %d oversize image(s)", dropped)
    batches = []
    for bucket in sorted(grouped):
        items = grouped[bucket]
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            images = np.stack([img for _, img in chunk])[:, None]
            rows = [ex.tokens for ex, _ in chunk]
            seq = None
            if vocab is not None:
                t_max = max(len(r) for r in rows) + 1    # room for END
                seq = np.full((len(chunk), t_max), PAD_ID, dtype=np.int64)
                for j, r in enumerate(rows):
                    ids = vocab.encode(r)
                    seq[j, :len(ids)] = ids
                    seq[j, len(ids)] = END_ID
            batches.append(Batch(ids=[ex.id for ex, _ in chunk], images=images,
                                 token_rows=rows, seq=seq))
    return batches, dropped


# ---------------------------------------------------------------------
# optional preprocessing utilities (real-scan path; the synthetic
# pipeline never needs them)
# ---------------------------------------------------------------------

def crop_margins(image: np.ndarray, threshold: float = 0.5, margin: int = 4) -> np.ndarray:
    """Crop to the ink bounding box plus a white margin."""
    ink = image < threshold
    if not ink.any():
        return image.copy()
    rows = np.flatnonzero(ink.any(axis=1))
    cols = np.flatnonzero(ink.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    core = image[r0:r1, c0:c1]
    out = np.ones((core.shape[0] + 2 * margin, core.shape[1] + 2 * margin), dtype=image.dtype)
    out[margin:margin + core.shape[0], margin:margin + core.shape[1]] = core
    return out


def downsample_half(image: np.ndarray) -> np.ndarray:
    """2x2 box-filter downsample (pads odd edges with white first)."""
    h, w = image.shape
    ph, pw = h + h % 2, w + w % 2
    padded = np.ones((ph, pw), dtype=np.float64)
    padded[:h, :w] = image
    return padded.reshape(ph // 2, 2, pw // 2, 2).mean(axis=(1, 3))
