"""Volume I/O, normalization, synthetic pair generation, and training-pair
sampling.

Two on-disk formats: the little FVOL container used for everything this
package writes, and a minimal single-file NIfTI-1 reader for ingesting real
scans. Manifests are UTF-8 TSV lines:
image_path<TAB>label_path|-<TAB>subject_id<TAB>frame_tag|-
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Tensor
from .transform import FULL, VELOCITY, FlowField, integrate_ss, warp


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class UnknownDtype(FormatError):
    pass


IMAGE, LABELS, FLOW = "image", "labels", "flow"
_DTYPE_CODES = {IMAGE: 0, LABELS: 1, FLOW: 2}
_CODE_ROLES = {v: k for k, v in _DTYPE_CODES.items()}
FVOL_MAGIC = b"FVOL1\x00"


@dataclass
class Volume:
    """Dense 3D scalar grid (or 3-channel flow) with spacing metadata."""

    data: np.ndarray              # (D,H,W) image/labels or (3,D,H,W) flow
    spacing: tuple = (1.0, 1.0, 1.0)
    role: str = IMAGE

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.role == FLOW:
            if self.data.ndim != 4 or self.data.shape[0] != 3:
                raise ValueError(f"flow volume must be (3,D,H,W), got {self.data.shape}")
        elif self.data.ndim != 3:
            raise ValueError(f"{self.role} volume must be (D,H,W), got {self.data.shape}")
        if self.role == LABELS:
            if self.data.dtype != np.uint8:
                if self.data.min() < 0 or self.data.max() > 255:
                    raise ValueError("label ids must fit in uint8")
                self.data = self.data.astype(np.uint8)
        else:
            self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def dims(self):
        return self.data.shape[-3:]

    def tensor(self):
        """As a (C,D,H,W) float tensor."""
        if self.role == FLOW:
            return Tensor(self.data)
        return Tensor(self.data[None].astype(np.float32))


def write_fvol(path, volume):
    d, h, w = volume.dims
    with open(path, "wb") as f:
        f.write(FVOL_MAGIC)
        f.write(struct.pack("<BB", _DTYPE_CODES[volume.role], 0))
        f.write(struct.pack("<3I", d, h, w))
        f.write(struct.pack("<3f", *volume.spacing))
        if volume.role == LABELS:
            f.write(volume.data.tobytes())
        else:
            f.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_fvol(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 32:
        raise Truncated(f"{path}: header is incomplete")
    if raw[:6] != FVOL_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:6]!r} is not {FVOL_MAGIC!r}")
    code = raw[6]
    if code not in _CODE_ROLES:
        raise UnknownDtype(f"{path}: unknown dtype code {code}")
    role = _CODE_ROLES[code]
    d, h, w = struct.unpack_from("<3I", raw, 8)
    spacing = struct.unpack_from("<3f", raw, 20)
    n = d * h * w
    if role == LABELS:
        payload = raw[32:]
        if len(payload) != n:
            raise Truncated(f"{path}: expected {n} label bytes, got {len(payload)}")
        data = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()
    else:
        c = 3 if role == FLOW else 1
        payload = raw[32:]
        if len(payload) != 4 * c * n:
            raise Truncated(
                f"{path}: expected {4 * c * n} payload bytes, got {len(payload)}"
            )
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        data = data.reshape((3, d, h, w) if role == FLOW else (d, h, w))
    return Volume(data, spacing, role)


# ---------------------------------------------------------------------------
# minimal NIfTI-1 reader (uncompressed, single-file or .hdr/.img pair)

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def read_nifti1(path):
    """Parse a NIfTI-1 volume: u8/i16/f32 payloads, 3D only, with scaling."""
    path = Path(path)
    with open(path, "rb") as f:
        hdr = f.read(348)
    if len(hdr) < 348:
        raise Truncated(f"{path}: header shorter than 348 bytes")
    if hdr[:2] == b"\x1f\x8b":
        raise FormatError(f"{path}: compressed stream; decompress it first")
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack_from(">i", hdr, 0)[0] == 348:
        bo = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr={sizeof_hdr}, not a NIfTI-1 header")
    magic = hdr[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"{path}: magic {magic!r}")
    dim = struct.unpack_from(f"{bo}8h", hdr, 40)
    if dim[0] != 3:
        raise FormatError(f"{path}: dim[0]={dim[0]}, only 3-D volumes are supported")
    (datatype,) = struct.unpack_from(f"{bo}h", hdr, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnknownDtype(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(f"{bo}8f", hdr, 76)
    (vox_offset,) = struct.unpack_from(f"{bo}f", hdr, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{bo}2f", hdr, 112)

    nx, ny, nz = dim[1], dim[2], dim[3]
    count = nx * ny * nz
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(bo)
    if magic == b"n+1\x00":
        src, offset = path, int(vox_offset)
    else:
        src, offset = path.with_suffix(".img"), 0
    with open(src, "rb") as f:
        f.seek(offset)
        payload = f.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise Truncated(f"{src}: payload shorter than dim implies")
    arr = np.frombuffer(payload, dtype=dt).astype(np.float32)
    # stored order is x-fastest; present as (z, y, x)
    arr = arr.reshape(nz, ny, nx)
    if scl_slope != 0.0:
        arr = arr * scl_slope + scl_inter
    return Volume(arr, (pixdim[3], pixdim[2], pixdim[1]), IMAGE)


def minmax_normalize(volume):
    """Rescale intensities to [0, 1]; constant volumes map to all-zeros."""
    if volume.role != IMAGE:
        raise ValueError("normalization applies to image volumes")
    lo = float(volume.data.min())
    hi = float(volume.data.max())
    if hi == lo:
        data = np.zeros_like(volume.data)
    else:
        data = (volume.data - lo) / (hi - lo)
    return Volume(data, volume.spacing, IMAGE)


# ---------------------------------------------------------------------------
# synthetic pairs with known ground-truth deformation


def synth_pair(seed, size=(48, 48, 48), n_structures=4):
    """Deterministic synthetic registration pair.

    Builds a blob image with labeled ellipsoidal structures, integrates a
    random smooth velocity into a ground-truth diffeomorphism, and returns
    (fixed image, fixed labels, moving image, moving labels, psi_gt) where
    fixed = moving warped by psi_gt.
    """
    size = tuple(int(s) for s in size)
    if any(s % 16 for s in size) or min(size) < 16:
        raise ValueError(f"size {size} must be divisible by 16")
    if n_structures < 2:
        raise ValueError("need at least 2 structures")
    rng = np.random.default_rng(seed)
    D, H, W = size
    gz, gy, gx = np.meshgrid(
        np.arange(D, dtype=np.float32),
        np.arange(H, dtype=np.float32),
        np.arange(W, dtype=np.float32),
        indexing="ij",
    )
    labels = np.zeros(size, dtype=np.uint8)
    image = np.full(size, 0.05, dtype=np.float32)
    margin = 0.22
    for k in range(1, n_structures + 1):
        center = rng.uniform(margin, 1 - margin, 3) * np.array(size)
        radii = rng.uniform(0.10, 0.22, 3) * np.array(size)
        q = (
            ((gz - center[0]) / radii[0]) ** 2
            + ((gy - center[1]) / radii[1]) ** 2
            + ((gx - center[2]) / radii[2]) ** 2
        )
        inside = q <= 1.0
        labels[inside] = k
        intensity = rng.uniform(0.35, 0.95)
        # soft shoulder keeps local contrast for window-based similarity
        soft = np.clip(1.0 - q, 0.0, 1.0) ** 0.5
        image = np.maximum(image, (intensity * soft).astype(np.float32))
    image = image + rng.normal(0.0, 0.02, size).astype(np.float32)
    image = np.clip(image, 0.0, 1.0)

    vel = rng.standard_normal((3, D, H, W)).astype(np.float32)
    for c in range(3):
        vel[c] = gaussian_filter(vel[c], sigma=2.0)
    mag = np.sqrt((vel**2).sum(axis=0)).max()
    target = min(size) / 10.0
    vel *= target / max(mag, 1e-8)

    psi_gt = integrate_ss(FlowField(Tensor(vel), FULL, VELOCITY), 7)
    moving_img = Volume(image, role=IMAGE)
    moving_lab = Volume(labels, role=LABELS)
    fixed_img = Volume(
        warp(moving_img.tensor(), psi_gt, "trilinear").data[0], role=IMAGE
    )
    fixed_lab = Volume(
        warp(
            Tensor(labels[None].astype(np.float32)), psi_gt, "nearest"
        ).data[0].astype(np.uint8),
        role=LABELS,
    )
    flow_vol = Volume(psi_gt.field.data, role=FLOW)
    return fixed_img, fixed_lab, moving_img, moving_lab, flow_vol


# ---------------------------------------------------------------------------
# manifests and pair sampling


@dataclass
class Entry:
    image: str
    label: str = None
    subject: str = ""
    frame: str = None


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    @property
    def intra(self):
        """Frame-tagged manifests pair frames within a subject."""
        return any(e.frame is not None for e in self.entries)

    def subjects(self):
        order = []
        by_subject = {}
        for e in self.entries:
            if e.subject not in by_subject:
                by_subject[e.subject] = []
                order.append(e.subject)
            by_subject[e.subject].append(e)
        return [(s, by_subject[s]) for s in order]


def write_manifest(path, manifest):
    with open(path, "w") as f:
        for e in manifest.entries:
            f.write(
                f"{e.image}\t{e.label or '-'}\t{e.subject}\t{e.frame or '-'}\n"
            )


def read_manifest(path):
    entries = []
    base = Path(path).parent
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{ln}: expected 4 tab-separated fields")
            image, label, subject, frame = parts
            img_path = str((base / image)) if not Path(image).is_absolute() else image
            lab_path = None
            if label != "-":
                lab_path = str((base / label)) if not Path(label).is_absolute() else label
            for p in (img_path, lab_path):
                if p is not None and not Path(p).exists():
                    raise FileNotFoundError(f"{path}:{ln}: missing file {p}")
            entries.append(
                Entry(img_path, lab_path, subject, None if frame == "-" else frame)
            )
    return Manifest(entries)


def load_entry(entry):
    img = read_fvol(entry.image)
    lab = read_fvol(entry.label) if entry.label else None
    return img, lab


STAGES = ("uniform", "labeled_only", "mixed")


def candidate_pairs(manifest, stage):
    """All ordered (fixed, moving) entry pairs admissible for a stage.

    Frame-tagged manifests pair frames within each subject; untagged ones
    pair entries of distinct subjects. Stages: uniform (no label constraint),
    labeled_only (both labeled), mixed (exactly one labeled, either role).
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}'")
    if not manifest.entries:
        raise ValueError("empty manifest")
    if manifest.intra:
        candidates = []
        for _, frames in manifest.subjects():
            for a in frames:
                for b in frames:
                    if a is not b:
                        candidates.append((a, b))
    else:
        subs = manifest.subjects()
        candidates = [
            (ea, eb)
            for sa, fa in subs
            for sb, fb in subs
            if sa != sb
            for ea in fa
            for eb in fb
        ]
    if stage == "labeled_only":
        candidates = [(a, b) for a, b in candidates if a.label and b.label]
    elif stage == "mixed":
        candidates = [
            (a, b)
            for a, b in candidates
            if (a.label is None) != (b.label is None)
        ]
    if not candidates:
        raise ValueError(f"stage '{stage}' has no admissible pairs in the manifest")
    return candidates


def sample_training_pair(manifest, mode, stage, rng):
    """Draw one ordered (fixed, moving) pair of loaded volumes.

    Unsupervised mode never exposes labels regardless of stage.
    """
    candidates = candidate_pairs(manifest, stage)
    fixed_e, moving_e = candidates[rng.integers(len(candidates))]
    fixed_img, fixed_lab = load_entry(fixed_e)
    moving_img, moving_lab = load_entry(moving_e)
    if mode == "unsupervised":
        fixed_lab = moving_lab = None
    return fixed_img, moving_img, fixed_lab, moving_lab


def make_synthetic_dataset(out_dir, n_pairs, size=(48, 48, 48), seed=0,
                           n_structures=4, labeled=None):
    """Generate pairs into out_dir/vols and write out_dir/manifest.tsv.

    `labeled`: per-pair label policy, a sequence of 'both' | 'fixed' | 'none'
    (defaults to 'both' everywhere). Returns the manifest with resolved paths.
    """
    out_dir = Path(out_dir)
    (out_dir / "vols").mkdir(parents=True, exist_ok=True)
    labeled = list(labeled) if labeled is not None else ["both"] * n_pairs
    if len(labeled) != n_pairs:
        raise ValueError("labeled policy length must equal n_pairs")
    entries = []
    for i in range(n_pairs):
        fi, fl, mi, ml, flow = synth_pair(seed + i, size, n_structures)
        sub = f"s{i:03d}"
        items = {
            f"{sub}_fix.fvol": fi,
            f"{sub}_fix_lab.fvol": fl,
            f"{sub}_mov.fvol": mi,
            f"{sub}_mov_lab.fvol": ml,
            f"{sub}_flow.fvol": flow,
        }
        for name, vol in items.items():
            write_fvol(out_dir / "vols" / name, vol)
        fixed_lab = f"vols/{sub}_fix_lab.fvol" if labeled[i] in ("both", "fixed") else None
        moving_lab = f"vols/{sub}_mov_lab.fvol" if labeled[i] == "both" else None
        entries.append(Entry(f"vols/{sub}_fix.fvol", fixed_lab, sub, "fix"))
        entries.append(Entry(f"vols/{sub}_mov.fvol", moving_lab, sub, "mov"))
    write_manifest(out_dir / "manifest.tsv", Manifest(entries))
    return read_manifest(out_dir / "manifest.tsv")
