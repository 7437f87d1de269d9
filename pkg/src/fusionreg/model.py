"""The gated-fusion registration network.

Three U-net style branches: two shared-weight streams encode each image
separately while a fusion stream sees both, and a fusion gate after each
fusion-stream block (scales 1/2 .. 1/16) learns voxelwise weights that blend
branch-derived features with fusion-stream features. Two half-scale heads
emit the mean / log-variance maps of the velocity posterior. Ablation
variants (early / mid / late / multi) reuse the same blocks under different
wiring, widened so their parameter count is at least the gated model's.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    avg_pool2,
    channel_softmax,
    concat_channels,
    conv3d,
    instance_norm,
    leaky_relu,
    mul,
    take_channels,
    upsample2,
)
from .transform import GaussianFlowParams

REFERENCE_WIDTHS = (32, 64, 64, 128, 128, 128, 64, 64, 64)

VARIANTS = ("auto", "early", "mid", "late", "multi")
MODES = ("unsupervised", "semisupervised")


@dataclass
class ModelConfig:
    """Topology description; branch widths are always half the fuse widths."""

    fuse_kernels: tuple = REFERENCE_WIDTHS
    input_shape: tuple = (48, 48, 48)
    use_large_kernel: bool = False
    mode: str = "unsupervised"
    n_labels: int = 0
    fusion_variant: str = "auto"

    def __post_init__(self):
        self.fuse_kernels = tuple(int(k) for k in self.fuse_kernels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.fuse_kernels) != 9:
            raise ValueError("fuse_kernels must list 9 block widths")
        if any(k < 2 or k % 2 for k in self.fuse_kernels):
            raise ValueError("fuse widths must be even (branch widths are half)")
        if len(self.input_shape) != 3 or any(s % 16 for s in self.input_shape):
            raise ValueError(f"input shape {self.input_shape} must be divisible by 16")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.fusion_variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant '{self.fusion_variant}'")
        if self.mode == "semisupervised":
            if self.n_labels < 2:
                raise ValueError("semisupervised mode needs n_labels >= 2")
            if self.fusion_variant not in ("auto", "multi"):
                raise ValueError(
                    "semisupervised mode needs the branch decoders; "
                    "use the auto or multi variant"
                )

    @property
    def branch_kernels(self):
        return tuple(k // 2 for k in self.fuse_kernels[:8])

    @property
    def lk_kernels(self):
        # width of each parallel conv inside the large-kernel refiner, blocks 2..8
        return tuple(k // 2 for k in self.fuse_kernels[1:8])

    @property
    def fuse_in_channels(self):
        extra = 2 * self.n_labels if self.mode == "semisupervised" else 0
        return 2 + extra

    def to_lines(self, prefix=""):
        return [
            f"{prefix}fuse_kernels={','.join(str(k) for k in self.fuse_kernels)}",
            f"{prefix}input_shape={','.join(str(s) for s in self.input_shape)}",
            f"{prefix}use_large_kernel={str(self.use_large_kernel).lower()}",
            f"{prefix}mode={self.mode}",
            f"{prefix}n_labels={self.n_labels}",
            f"{prefix}fusion_variant={self.fusion_variant}",
        ]

    @classmethod
    def from_mapping(cls, kv, prefix=""):
        def get(key, default):
            return kv.get(prefix + key, default)

        return cls(
            fuse_kernels=tuple(
                int(x) for x in get("fuse_kernels", "32,64,64,128,128,128,64,64,64").split(",")
            ),
            input_shape=tuple(int(x) for x in get("input_shape", "48,48,48").split(",")),
            use_large_kernel=get("use_large_kernel", "false") == "true",
            mode=get("mode", "unsupervised"),
            n_labels=int(get("n_labels", "0")),
            fusion_variant=get("fusion_variant", "auto"),
        )


@dataclass
class NetworkOutput:
    flow_params: GaussianFlowParams
    seg_f: Tensor = None
    seg_m: Tensor = None
    gates: list = None  # [(w_mf, w_fuse)] for blocks 2..8, gated variants only


# ---------------------------------------------------------------------------
# parameter shape schedule


def _conv_shapes(shapes, name, ci, co, k=(3, 3, 3)):
    shapes[f"{name}.w"] = (co, ci) + tuple(k)
    shapes[f"{name}.b"] = (co,)


def _block_shapes(shapes, name, ci, c):
    _conv_shapes(shapes, f"{name}.c1", ci, c)
    shapes[f"{name}.c1.gain"] = (c,)
    shapes[f"{name}.c1.shift"] = (c,)
    _conv_shapes(shapes, f"{name}.c2", c, c)
    shapes[f"{name}.c2.gain"] = (c,)
    shapes[f"{name}.c2.shift"] = (c,)


def _branch_block_inputs(bw, in_ch=1):
    return [
        in_ch, bw[0], bw[1], bw[2], bw[3],
        bw[4] + bw[3], bw[5] + bw[2], bw[6] + bw[1],
    ]


def _fuse_block_inputs(fw, in_ch):
    return [
        in_ch, fw[0], fw[1], fw[2], fw[3],
        fw[4] + fw[3], fw[5] + fw[2], fw[6] + fw[1], fw[7],
    ]


def _param_shapes(cfg, fw=None):
    """Ordered name -> shape map for every parameter of a configuration."""
    fw = list(cfg.fuse_kernels if fw is None else fw)
    bw = [k // 2 for k in fw[:8]]
    variant = cfg.fusion_variant
    shapes = {}

    if variant in ("auto", "multi", "mid", "late"):
        n_branch = 5 if variant == "mid" else 8
        ins = _branch_block_inputs(bw)
        for i in range(1, n_branch + 1):
            _block_shapes(shapes, f"branch.b{i}", ins[i - 1], bw[i - 1])

    if variant in ("auto", "multi"):
        ins = _fuse_block_inputs(fw, cfg.fuse_in_channels)
        for i in range(1, 10):
            _block_shapes(shapes, f"fuse.b{i}", ins[i - 1], fw[i - 1])
        for i in range(2, 9):
            c = fw[i - 1]
            _conv_shapes(shapes, f"fg{i}.mix", 2 * bw[i - 1], c)
            if variant == "auto":
                _conv_shapes(shapes, f"fg{i}.gmf", 2 * c, 1, (1, 1, 1))
                _conv_shapes(shapes, f"fg{i}.gfu", 2 * c, 1, (1, 1, 1))
            if cfg.use_large_kernel:
                e = c // 2
                _conv_shapes(shapes, f"fg{i}.lk.k3", c, e)
                _conv_shapes(shapes, f"fg{i}.lk.kz", c, e, (5, 1, 1))
                _conv_shapes(shapes, f"fg{i}.lk.ky", c, e, (1, 5, 1))
                _conv_shapes(shapes, f"fg{i}.lk.kx", c, e, (1, 1, 5))
                _conv_shapes(shapes, f"fg{i}.lk.merge", 4 * e, c, (1, 1, 1))
            else:
                _conv_shapes(shapes, f"fg{i}.ref", c, c)
        head_in = fw[8]
    elif variant == "early":
        ins = _fuse_block_inputs(fw, 2)
        for i in range(1, 10):
            _block_shapes(shapes, f"fuse.b{i}", ins[i - 1], fw[i - 1])
        head_in = fw[8]
    elif variant == "mid":
        dec_ins = [bw[4] + bw[3], fw[5] + bw[2], fw[6] + bw[1], fw[7]]
        for i, ci in zip(range(6, 10), dec_ins):
            _block_shapes(shapes, f"fuse.b{i}", ci, fw[i - 1])
        head_in = fw[8]
    elif variant == "late":
        _block_shapes(shapes, "fuse.b9", 2 * bw[7], fw[8])
        head_in = fw[8]

    _conv_shapes(shapes, "head.mu", head_in, 3)
    _conv_shapes(shapes, "head.logvar", head_in, 3)
    if cfg.mode == "semisupervised":
        _conv_shapes(shapes, "seg", bw[7], cfg.n_labels)
    return shapes


def _count_shapes(shapes):
    return sum(int(np.prod(s)) for s in shapes.values())


def _fair_widths(cfg):
    """Widths for an ablation variant: scale the base schedule until the
    variant has at least as many parameters as the gated model."""
    if cfg.fusion_variant == "auto":
        return list(cfg.fuse_kernels)
    auto_cfg = ModelConfig(
        fuse_kernels=cfg.fuse_kernels,
        input_shape=cfg.input_shape,
        use_large_kernel=cfg.use_large_kernel,
        mode=cfg.mode,
        n_labels=cfg.n_labels,
        fusion_variant="auto",
    )
    target = _count_shapes(_param_shapes(auto_cfg))
    for step in range(0, 64):
        m = 1.0 + step / 16.0
        fw = [max(2, 2 * round(k * m / 2)) for k in cfg.fuse_kernels]
        if _count_shapes(_param_shapes(cfg, fw)) >= target:
            return fw
    raise RuntimeError("no fair width multiplier found")  # pragma: no cover


# ---------------------------------------------------------------------------
# model


class GatedFusionNet:
    def __init__(self, cfg, params, widths):
        self.cfg = cfg
        self.params = params  # ordered name -> Tensor
        self.widths = widths  # possibly scaled for ablation variants
        self.gate_override = None  # test hook: force w_mf to a constant

    def p(self, name):
        return self.params[name]

    def count_params(self):
        """Total scalars; weight sharing counts each buffer once."""
        seen = set()
        total = 0
        for t in self.params.values():
            if id(t) not in seen:
                seen.add(id(t))
                total += t.data.size
        return total

    def param_breakdown(self):
        return [(name, t.data.size) for name, t in self.params.items()]

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    # ---- forward passes -------------------------------------------------

    def _conv(self, x, name):
        return conv3d(x, self.p(f"{name}.w"), self.p(f"{name}.b"))

    def _block(self, x, name):
        for c in ("c1", "c2"):
            x = self._conv(x, f"{name}.{c}")
            x = leaky_relu(x, 0.2)
            x = instance_norm(x, self.p(f"{name}.{c}.gain"), self.p(f"{name}.{c}.shift"))
        return x

    def _branch(self, x, n_blocks=8):
        """Shared-weight stream; returns block outputs keyed 1..n_blocks."""
        f = {}
        f[1] = self._block(x, "branch.b1")
        f[2] = self._block(avg_pool2(f[1]), "branch.b2")
        f[3] = self._block(avg_pool2(f[2]), "branch.b3")
        f[4] = self._block(avg_pool2(f[3]), "branch.b4")
        f[5] = self._block(avg_pool2(f[4]), "branch.b5")
        if n_blocks == 5:
            return f
        f[6] = self._block(concat_channels([upsample2(f[5]), f[4]]), "branch.b6")
        f[7] = self._block(concat_channels([upsample2(f[6]), f[3]]), "branch.b7")
        f[8] = self._block(concat_channels([upsample2(f[7]), f[2]]), "branch.b8")
        return f

    def _refine(self, x, i):
        if self.cfg.use_large_kernel:
            paths = [
                leaky_relu(self._conv(x, f"fg{i}.lk.{tag}"), 0.2)
                for tag in ("k3", "kz", "ky", "kx")
            ]
            return add(x, self._conv(concat_channels(paths), f"fg{i}.lk.merge"))
        return add(x, leaky_relu(self._conv(x, f"fg{i}.ref"), 0.2))

    def _fg(self, i, f_m, f_f, f_fuse):
        """Blend branch-derived and fusion-stream features at block i."""
        mixed = self._conv(concat_channels([f_m, f_f]), f"fg{i}.mix")
        gates = None
        if self.cfg.fusion_variant == "multi":
            blended = add(mixed, f_fuse)
        elif self.gate_override is not None:
            spatial = (1,) + tuple(f_fuse.shape[1:])
            w_mf = Tensor(np.full(spatial, self.gate_override, dtype=f_fuse.dtype))
            w_fuse = Tensor(np.full(spatial, 1.0 - self.gate_override, dtype=f_fuse.dtype))
            blended = add(mul(w_mf, mixed), mul(w_fuse, f_fuse))
            gates = (w_mf, w_fuse)
        else:
            pair = concat_channels([mixed, f_fuse])
            logits = concat_channels(
                [self._conv(pair, f"fg{i}.gmf"), self._conv(pair, f"fg{i}.gfu")]
            )
            w = channel_softmax(logits)
            w_mf = take_channels(w, 0, 1)
            w_fuse = take_channels(w, 1, 2)
            blended = add(mul(w_mf, mixed), mul(w_fuse, f_fuse))
            gates = (w_mf, w_fuse)
        return self._refine(blended, i), gates

    def _seg_head(self, branch_out):
        return channel_softmax(upsample2(self._conv(branch_out, "seg")))

    def _heads(self, x):
        return GaussianFlowParams(
            self._conv(x, "head.mu"), self._conv(x, "head.logvar")
        )

    def forward(self, fixed, moving):
        """Run the network; fixed/moving are (1,D,H,W) tensors in [0,1]."""
        expect = (1,) + tuple(self.cfg.input_shape)
        for name, t in (("fixed", fixed), ("moving", moving)):
            if tuple(t.shape) != expect:
                raise ShapeError(f"{name} image has shape {t.shape}, expected {expect}")
        variant = self.cfg.fusion_variant
        if variant in ("auto", "multi"):
            return self._forward_gated(fixed, moving)
        if variant == "early":
            return self._forward_early(fixed, moving)
        if variant == "mid":
            return self._forward_mid(fixed, moving)
        return self._forward_late(fixed, moving)

    def _forward_gated(self, fixed, moving):
        fm = self._branch(moving)
        ff = self._branch(fixed)
        seg_m = seg_f = None
        fuse_in = [moving, fixed]
        if self.cfg.mode == "semisupervised":
            seg_m = self._seg_head(fm[8])
            seg_f = self._seg_head(ff[8])
            fuse_in += [seg_m, seg_f]
        x = self._block(concat_channels(fuse_in), "fuse.b1")
        gates = []

        def gated_block(i, x_in):
            h = self._block(x_in, f"fuse.b{i}")
            out, g = self._fg(i, fm[i], ff[i], h)
            gates.append(g)
            return out

        f2 = gated_block(2, avg_pool2(x))
        f3 = gated_block(3, avg_pool2(f2))
        f4 = gated_block(4, avg_pool2(f3))
        f5 = gated_block(5, avg_pool2(f4))
        f6 = gated_block(6, concat_channels([upsample2(f5), f4]))
        f7 = gated_block(7, concat_channels([upsample2(f6), f3]))
        f8 = gated_block(8, concat_channels([upsample2(f7), f2]))
        x = self._block(f8, "fuse.b9")
        return NetworkOutput(
            self._heads(x),
            seg_f=seg_f,
            seg_m=seg_m,
            gates=gates if self.cfg.fusion_variant == "auto" else None,
        )

    def _forward_early(self, fixed, moving):
        x1 = self._block(concat_channels([moving, fixed]), "fuse.b1")
        x2 = self._block(avg_pool2(x1), "fuse.b2")
        x3 = self._block(avg_pool2(x2), "fuse.b3")
        x4 = self._block(avg_pool2(x3), "fuse.b4")
        x5 = self._block(avg_pool2(x4), "fuse.b5")
        x6 = self._block(concat_channels([upsample2(x5), x4]), "fuse.b6")
        x7 = self._block(concat_channels([upsample2(x6), x3]), "fuse.b7")
        x8 = self._block(concat_channels([upsample2(x7), x2]), "fuse.b8")
        x9 = self._block(x8, "fuse.b9")
        return NetworkOutput(self._heads(x9))

    def _forward_mid(self, fixed, moving):
        fm = self._branch(moving, n_blocks=5)
        ff = self._branch(fixed, n_blocks=5)
        s = {i: add(fm[i], ff[i]) for i in (2, 3, 4, 5)}
        x6 = self._block(concat_channels([upsample2(s[5]), s[4]]), "fuse.b6")
        x7 = self._block(concat_channels([upsample2(x6), s[3]]), "fuse.b7")
        x8 = self._block(concat_channels([upsample2(x7), s[2]]), "fuse.b8")
        x9 = self._block(x8, "fuse.b9")
        return NetworkOutput(self._heads(x9))

    def _forward_late(self, fixed, moving):
        fm = self._branch(moving)
        ff = self._branch(fixed)
        x9 = self._block(concat_channels([fm[8], ff[8]]), "fuse.b9")
        return NetworkOutput(self._heads(x9))


def build_model(cfg, rng=None, dtype=np.float32):
    """Allocate and initialize all parameters for a configuration."""
    rng = rng or np.random.default_rng(0)
    widths = _fair_widths(cfg)
    shapes = _param_shapes(cfg, widths)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(".shift"):
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".b"):
            fill = -10.0 if name == "head.logvar.b" else 0.0
            data = np.full(shape, fill, dtype=dtype)
        else:  # .w
            if ".gmf" in name or ".gfu" in name:
                # zero gate logits: every gate starts as an unbiased 0.5/0.5 blend
                data = np.zeros(shape, dtype=dtype)
            else:
                if name.startswith("head."):
                    std = 1e-5
                else:
                    fan_in = int(np.prod(shape[1:]))
                    std = np.sqrt(2.0 / fan_in)
                data = (rng.standard_normal(shape) * std).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return GatedFusionNet(cfg, params, widths)


def count_params(model):
    return model.count_params()


def fg_weight_means(model, pairs):
    """Mean of each fusion-gate's w_fuse map over voxels and pairs.

    pairs: iterable of (fixed, moving) tensors. Returns 7 floats for blocks
    2..8, each in [0, 1]; fresh zero-gate models report 0.5 everywhere.
    """
    if model.cfg.fusion_variant != "auto":
        raise ValueError("gate statistics exist only for the gated (auto) variant")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one image pair")
    sums = np.zeros(7, dtype=np.float64)
    count = 0
    for fixed, moving in pairs:
        out = model.forward(fixed, moving)
        for k, (_, w_fuse) in enumerate(out.gates):
            sums[k] += float(w_fuse.data.mean())
        count += 1
    return (sums / count).tolist()


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, per-tensor name/rank/dims/payload


CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1


def write_tensor_file(path, arrays):
    """Write an ordered {name: float array} map in the checkpoint container."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            a = np.asarray(arr)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor_file(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def save_checkpoint(path, model):
    write_tensor_file(path, {k: t.data for k, t in model.params.items()})
    with open(f"{path}.cfg", "w") as f:
        f.write("\n".join(model.cfg.to_lines()) + "\n")


def load_checkpoint(path):
    arrays = read_tensor_file(path)
    kv = {}
    with open(f"{path}.cfg") as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                kv[k] = v
    cfg = ModelConfig.from_mapping(kv)
    model = build_model(cfg)
    if set(arrays) != set(model.params):
        missing = set(model.params) - set(arrays)
        extra = set(arrays) - set(model.params)
        raise ValueError(
            f"{path}: parameter names mismatch (missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]})"
        )
    for name, arr in arrays.items():
        t = model.params[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(t.dtype)
    return model
