"""Full classifier assembly: stem, four conv stages with attention, the
transformer stage, pooling and the linear head, plus parameter/MAC census,
ablation presets and binary checkpoints.
"""

import dataclasses
import io
import struct

import numpy as np

from .blocks import (Cbam, ConvNextBlock, Downsample, DualAttention, Module,
                     Stem, TransformerBlock, _param, trunc_normal)
from .tensor import (dropout, layer_norm, linear, load_tensor, pool2d,
                     save_tensor)

# Published per-layer parameter counts for the full-scale configuration,
# printed next to our own census by the params command. The stage rows match
# 3/3/9/3 blocks of widths 96/192/384/768; total includes layers the rows omit.
REFERENCE_COUNTS = {
    "stem": 4_704 + 192,
    "stage1": 239_904 + 2_412,
    "stage2": 922_176 + 9_432,
    "stage3": 10_841_472 + 37_296,
    "stage4": 14_305_536 + 1_248_032,
    "stage5": 2_362_368 + 4_722_432,
    "pooling": 1_536,
    "classifier": 3_076,
    "total": 36_330_000,
    "total_macs": 391_950_000,
}


@dataclasses.dataclass
class ModelConfig:
    """Architecture switches. The defaults are the full-scale configuration;
    the attention flags double as the ablation grid."""

    input_size: int = 224
    in_channels: int = 3
    stage_dims: tuple = (96, 192, 384, 768)
    stage_depths: tuple = (3, 3, 9, 3)
    use_cbam: tuple = (True, True, True)   # after stages 1-3
    use_danet: bool = True                 # in stage 4
    use_transformer: bool = True           # stage 5
    use_grn: bool = False
    num_classes: int = 4
    dropout: float = 0.1
    heads: int = 8
    cbam_reduction: int = 16
    pos_embed: bool = False

    def validate(self):
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ValueError("stage_dims and stage_depths must have 4 entries")
        for a, b in zip(self.stage_dims, self.stage_dims[1:]):
            if b != 2 * a:
                raise ValueError(f"stage_dims must strictly double, got {self.stage_dims}")
        if len(self.use_cbam) != 3:
            raise ValueError("use_cbam needs one flag per stage 1-3")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.stage_dims[3] % self.heads:
            raise ValueError(f"heads={self.heads} must divide final dim {self.stage_dims[3]}")
        return self

    def to_lines(self):
        out = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, tuple):
                value = ",".join(str(int(v) if isinstance(v, bool) else v) for v in value)
            out.append(f"{field.name}={value}")
        return out

    @classmethod
    def from_lines(cls, lines):
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            if types[key] == "tuple" or types[key] is tuple:
                parts = [p for p in raw.split(",") if p]
                if key == "use_cbam":
                    kwargs[key] = tuple(bool(int(p)) for p in parts)
                else:
                    kwargs[key] = tuple(int(p) for p in parts)
            elif types[key] == "bool" or types[key] is bool:
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            elif types[key] == "float" or types[key] is float:
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs).validate()


def model_presets():
    """Named configurations: full scale, desk scale (CI-sized), and toy
    (smallest wiring that still exercises every module)."""
    return {
        "paper": ModelConfig(),
        "desk": ModelConfig(input_size=64, stage_dims=(24, 48, 96, 192),
                            stage_depths=(1, 1, 1, 1), heads=4, cbam_reduction=8),
        "toy": ModelConfig(input_size=32, stage_dims=(8, 16, 32, 64),
                           stage_depths=(1, 1, 1, 1), heads=4, cbam_reduction=4),
    }


def ablation_presets(base=None):
    """The five ablation rows: baseline, +CBAM, +DANet, +CBAM+DANet, full."""
    base = base or ModelConfig()
    rows = [
        ("baseline", dict(use_cbam=(False,) * 3, use_danet=False, use_transformer=False)),
        ("cbam", dict(use_cbam=(True,) * 3, use_danet=False, use_transformer=False)),
        ("danet", dict(use_cbam=(False,) * 3, use_danet=True, use_transformer=False)),
        ("cbam_danet", dict(use_cbam=(True,) * 3, use_danet=True, use_transformer=False)),
        ("full", dict(use_cbam=(True,) * 3, use_danet=True, use_transformer=True)),
    ]
    return [(name, dataclasses.replace(base, **flags).validate()) for name, flags in rows]


class Stage(Module):
    def __init__(self, blocks, attn=None, down=None):
        if down is not None:
            self.down = down
        self.block = blocks
        if attn is not None:
            self.attn = attn

    def forward(self, x):
        if hasattr(self, "down"):
            x = self.down(x)
        for blk in self.block:
            x = blk(x)
        if hasattr(self, "attn"):
            x = self.attn(x)
        return x


class ConMatFormer(Module):
    """The assembled network. Stages 1-3 stack ConvNeXt blocks with an
    optional trailing CBAM; stage 4 adds dual attention; stage 5 is a
    transformer block with LayerNorm and dropout; global average pooling,
    LayerNorm and a linear head produce the logits."""

    def __init__(self, config, rng=None, dtype=np.float32):
        config.validate()
        rng = rng or np.random.default_rng(0)
        dims = config.stage_dims
        self.config = config
        self.dtype = dtype
        self.stem = Stem(config.in_channels, dims[0], rng=rng, dtype=dtype)

        def make_blocks(c, depth):
            return [ConvNextBlock(c, use_grn=config.use_grn, rng=rng, dtype=dtype)
                    for _ in range(depth)]

        def make_cbam(idx):
            if not config.use_cbam[idx]:
                return None
            return Cbam(dims[idx], reduction=config.cbam_reduction, rng=rng, dtype=dtype)

        self.stage1 = Stage(make_blocks(dims[0], config.stage_depths[0]), attn=make_cbam(0))
        self.stage2 = Stage(make_blocks(dims[1], config.stage_depths[1]), attn=make_cbam(1),
                            down=Downsample(dims[0], dims[1], rng=rng, dtype=dtype))
        self.stage3 = Stage(make_blocks(dims[2], config.stage_depths[2]), attn=make_cbam(2),
                            down=Downsample(dims[1], dims[2], rng=rng, dtype=dtype))
        danet = DualAttention(dims[3], rng=rng, dtype=dtype) if config.use_danet else None
        self.stage4 = Stage(make_blocks(dims[3], config.stage_depths[3]), attn=danet,
                            down=Downsample(dims[2], dims[3], rng=rng, dtype=dtype))
        if config.use_transformer:
            tokens = (config.input_size // 32) ** 2 if config.pos_embed else None
            self.transformer = TransformerBlock(
                dims[3], heads=config.heads, dropout_p=config.dropout,
                pos_embed_tokens=tokens, rng=rng, dtype=dtype)
            self.stage5_ln_gamma = _param(np.ones(dims[3]), dtype)
            self.stage5_ln_beta = _param(np.zeros(dims[3]), dtype)
        self.final_ln_gamma = _param(np.ones(dims[3]), dtype)
        self.final_ln_beta = _param(np.zeros(dims[3]), dtype)
        self.head_w = trunc_normal((dims[3], config.num_classes), rng, dtype=dtype)
        self.head_b = _param(np.zeros(config.num_classes), dtype)

    def forward(self, x, training=False, rng=None, taps=None, debug=False):
        """Batch [B,3,S,S] -> logits [B,num_classes].

        taps: optional iterable of stage names; returns (logits, {name: tensor})
        with each tapped tensor marked to retain its gradient.
        """
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected [B,{self.config.in_channels},S,S], got {x.shape}")
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ValueError(f"expected input size {self.config.input_size}, got {x.shape}")
        taps = set(taps or ())
        tapped = {}

        def record(name, t):
            if debug and not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite activations after {name}")
            if name in taps:
                tapped[name] = t.retain_grad()
            return t

        h = record("stem", self.stem(x))
        h = record("stage1", self.stage1(h))
        h = record("stage2", self.stage2(h))
        h = record("stage3", self.stage3(h))
        h = record("stage4", self.stage4(h))
        if self.config.use_transformer:
            h = self.transformer(h, training=training, rng=rng)
            h = layer_norm(h, self.stage5_ln_gamma, self.stage5_ln_beta, axis=-3)
            h = dropout(h, self.config.dropout, training, rng)
            h = record("stage5", h)
        pooled = pool2d(h, "avg")                                  # [B, C]
        pooled = layer_norm(pooled, self.final_ln_gamma, self.final_ln_beta, axis=-1)
        pooled = record("pool", pooled)
        logits = linear(pooled, self.head_w, self.head_b)
        return (logits, tapped) if taps else logits


def build_model(config, rng=None, dtype=np.float32):
    return ConMatFormer(config, rng=rng, dtype=dtype)


# -- parameter / MAC census ----------------------------------------------------


@dataclasses.dataclass
class ReportRow:
    module: str
    params: int
    macs: int


@dataclasses.dataclass
class ParamReport:
    rows: list

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.rows)

    def by_module(self, prefix):
        return sum(r.params for r in self.rows if r.module == prefix
                   or r.module.startswith(prefix + "."))

    def to_csv_lines(self):
        lines = ["module,name,params,macs"]
        lines += [f"{r.module.split('.')[0]},{r.module},{r.params},{r.macs}"
                  for r in self.rows]
        lines.append(f"total,total,{self.total_params},{self.total_macs}")
        return lines


def _conv_macs(cout, cin_per_group, kh, kw, out_h, out_w):
    return cout * cin_per_group * kh * kw * out_h * out_w


def count_params_macs(model, input_size=None):
    """Exact parameter census plus analytic multiply-accumulate counts for
    one sample at the given input size (conv/linear/attention terms)."""
    cfg = model.config
    size = input_size or cfg.input_size
    dims = cfg.stage_dims
    rows = []
    s = size // 4   # spatial side after the stem

    def block_rows(stage_name, stage, side, c):
        n = side * side
        for i, blk in enumerate(stage.block):
            macs = _conv_macs(c, 1, 7, 7, side, side)          # depthwise
            macs += n * c * 4 * c * 2                           # two pointwise maps
            rows.append(ReportRow(f"{stage_name}.block{i}", blk.param_count(), macs))

    def cbam_rows(stage_name, attn, side, c):
        macs = 2 * (c * (c // attn.reduction) * 2)              # shared MLP, avg+max
        macs += _conv_macs(1, 2, 7, 7, side, side)              # spatial gate conv
        rows.append(ReportRow(f"{stage_name}.attn", attn.param_count(), macs))

    rows.append(ReportRow("stem", model.stem.param_count(),
                          _conv_macs(dims[0], cfg.in_channels, 4, 4, s, s)))
    side = s
    for idx, name in enumerate(("stage1", "stage2", "stage3", "stage4")):
        stage = getattr(model, name)
        c = dims[idx]
        if hasattr(stage, "down"):
            side //= 2
            rows.append(ReportRow(f"{name}.down", stage.down.param_count(),
                                  _conv_macs(c, dims[idx - 1], 2, 2, side, side)))
        block_rows(name, stage, side, c)
        if hasattr(stage, "attn"):
            if isinstance(stage.attn, Cbam):
                cbam_rows(name, stage.attn, side, c)
            else:
                n = side * side
                macs = 3 * _conv_macs(c, c, 1, 1, side, side)   # B, C, D projections
                macs += 2 * c * n * n                           # position energy+context
                macs += 2 * c * c * n                           # channel energy+context
                rows.append(ReportRow(f"{name}.attn", stage.attn.param_count(), macs))

    if cfg.use_transformer:
        d = dims[3]
        n = side * side
        attn_macs = 4 * n * d * d + 2 * n * n * d
        rows.append(ReportRow("stage5.attention", model.transformer.attention_param_count(),
                              attn_macs))
        rows.append(ReportRow("stage5.mlp", model.transformer.mlp_param_count(),
                              n * d * 4 * d * 2))
        ln_params = (model.transformer.ln1_gamma.size + model.transformer.ln1_beta.size
                     + model.transformer.ln2_gamma.size + model.transformer.ln2_beta.size
                     + model.stage5_ln_gamma.size + model.stage5_ln_beta.size)
        if hasattr(model.transformer, "pos_embed"):
            ln_params += model.transformer.pos_embed.size
        rows.append(ReportRow("stage5.norms", ln_params, 0))
    rows.append(ReportRow("pooling", model.final_ln_gamma.size + model.final_ln_beta.size, 0))
    rows.append(ReportRow("classifier", model.head_w.size + model.head_b.size,
                          dims[3] * cfg.num_classes))
    report = ParamReport(rows)
    census_total = sum(p.size for p in model.parameters())
    assert report.total_params == census_total, \
        f"census mismatch: {report.total_params} vs {census_total}"
    return report


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"CMFK"
_CKPT_VERSION = 1


def checkpoint_bytes(model):
    """Named-tensor container with the model config as a textual header."""
    buf = io.BytesIO()
    header = "\n".join(model.config.to_lines()).encode() + b"\n"
    entries = list(model.named_parameters())
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<HI", _CKPT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(entries)))
    for name, tensor in entries:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        save_tensor(tensor, buf)
    return buf.getvalue()


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path, dtype=np.float32):
    """Rebuild a model from a checkpoint; returns (model, config)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, header_len = struct.unpack("<HI", fh.read(6))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_lines(fh.read(header_len).decode().splitlines())
        (count,) = struct.unpack("<I", fh.read(4))
        weights = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            weights[name] = load_tensor(fh)
    model = build_model(config, rng=np.random.default_rng(0), dtype=dtype)
    own = dict(model.named_parameters())
    if set(own) != set(weights):
        missing = set(own) ^ set(weights)
        raise ValueError(f"checkpoint does not match architecture, differing keys: {sorted(missing)[:5]}")
    for name, tensor in own.items():
        stored = weights[name]
        if stored.shape != tensor.shape:
            raise ValueError(f"shape mismatch for {name}: {stored.shape} vs {tensor.shape}")
        tensor.data = stored.data.astype(dtype)
    return model, config
