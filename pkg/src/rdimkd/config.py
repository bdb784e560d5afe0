"""Experiment configuration: a small sectioned ``key = value`` format.

Grammar::

    file     := line*
    line     := blank | comment | section | assigns
    comment  := ('#' | ';') any*
    section  := '[' name ']'
    assigns  := assign (',' assign)*
    assign   := key '=' value

A comma-separated piece without ``=`` continues the previous value, so
``hidden = 64, 64`` is one assignment and ``alpha=1, r=4`` is two.  Keys
appearing before any section header are placed by name when the name is
unique across sections (``alpha``, ``r``, ``mask``, ...).

Sections and keys (defaults give the moons toy preset)::

    [dataset]    kind n_train n_test noise classes seed
    [teacher]    hidden taps seed
    [student]    hidden taps split inherit
    [train]      epochs batch_size lr momentum weight_decay schedule seed
    [distill]    method r alpha beta mask seed
    [experiment] output_dir trials teacher_checkpoint

``taps`` and ``split`` index the linear layers (0 = first).  ``split`` is a
list of ``layer:t`` entries.  ``mask`` is a 0/1 string over the student taps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .exceptions import ParseError, ValidationError
from .losses import DistillSpec, mask_to_str
from .nets import mlp_specs
from .train import DatasetSpec, TrainSpec


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple
    taps: tuple
    split: tuple = ()  # ((layer, t), ...)
    seed: int = 0
    inherit: bool = False

    def specs(self, input_dim: int, output_dim: int):
        return mlp_specs(input_dim, list(self.hidden), output_dim, taps=self.taps, splits=dict(self.split))

    def tap_dims(self, input_dim: int, output_dim: int):
        return [s.tap_dim for s in self.specs(input_dim, output_dim) if s.tap]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: NetConfig = field(default_factory=lambda: NetConfig((64, 64), (0, 1)))
    student: NetConfig = field(default_factory=lambda: NetConfig((8, 8), (1, 2), ((1, 64), (2, 64))))
    train: TrainSpec = field(default_factory=lambda: TrainSpec(lr_init=0.02))
    distill: DistillSpec = field(default_factory=lambda: DistillSpec("random", 4.0, 1.0, 0.0, "11", 0))
    output_dir: str = "out"
    trials: int = 3
    teacher_checkpoint: str = ""

    @property
    def input_dim(self) -> int:
        return 2

    @property
    def output_dim(self) -> int:
        return self.dataset.classes

    def teacher_specs(self):
        return self.teacher.specs(self.input_dim, self.output_dim)

    def student_specs(self):
        return self.student.specs(self.input_dim, self.output_dim)


SECTIONS = {
    "dataset": ("kind", "n_train", "n_test", "noise", "classes", "seed"),
    "teacher": ("hidden", "taps", "seed"),
    "student": ("hidden", "taps", "split", "inherit"),
    "train": ("epochs", "batch_size", "lr", "momentum", "weight_decay", "schedule", "seed"),
    "distill": ("method", "r", "alpha", "beta", "mask", "seed"),
    "experiment": ("output_dir", "trials", "teacher_checkpoint"),
}


def _unique_owner(key):
    owners = [s for s, keys in SECTIONS.items() if key in keys]
    return owners[0] if len(owners) == 1 else None


def _split_assignments(line, lineno):
    pieces = line.split(",")
    out = []
    for piece in pieces:
        if "=" in piece:
            key, value = piece.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError("empty key", line=lineno)
            out.append([key, value.strip()])
        elif out:
            out[-1][1] += "," + piece
        else:
            raise ParseError(f"expected key = value, got {line.strip()!r}", line=lineno)
    return [(k, v.strip()) for k, v in out]


def _read(text):
    """Raw ``{section: {key: (value, lineno)}}``."""
    raw = {s: {} for s in SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ParseError(f"malformed section header {stripped!r}", line=lineno)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ParseError(f"unknown section [{section}]", line=lineno)
            continue
        for key, value in _split_assignments(stripped, lineno):
            target = section or _unique_owner(key)
            if target is None:
                raise ParseError("key is ambiguous outside a section", line=lineno, field=key)
            if key not in SECTIONS[target]:
                raise ParseError(f"unknown key in [{target}]", line=lineno, field=key)
            raw[target][key] = (value, lineno)
    return raw


def _conv(raw, section, key, kind, default):
    if key not in raw[section]:
        return default
    value, lineno = raw[section][key]
    name = f"{section}.{key}"
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "ints":
            return tuple(int(v) for v in value.split(",") if v.strip()) if value.strip() else ()
        if kind == "split":
            pairs = []
            for item in value.split(","):
                if item.strip():
                    layer, t = item.split(":")
                    pairs.append((int(layer), int(t)))
            return tuple(pairs)
        return value
    except ValueError:
        raise ParseError(f"cannot read {value!r}", line=lineno, field=name) from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; unspecified keys take the toy-preset defaults."""
    raw = _read(text)
    base = ExperimentConfig()
    g = lambda s, k, kind, default: _conv(raw, s, k, kind, default)  # noqa: E731

    try:
        dataset = DatasetSpec(
            g("dataset", "kind", str, base.dataset.kind),
            g("dataset", "n_train", int, base.dataset.n_train),
            g("dataset", "n_test", int, base.dataset.n_test),
            g("dataset", "noise", float, base.dataset.noise),
            g("dataset", "classes", int, base.dataset.classes),
            g("dataset", "seed", int, base.dataset.seed),
        )
        teacher = NetConfig(
            g("teacher", "hidden", "ints", base.teacher.hidden),
            g("teacher", "taps", "ints", base.teacher.taps),
            seed=g("teacher", "seed", int, base.teacher.seed),
        )
        student = NetConfig(
            g("student", "hidden", "ints", base.student.hidden),
            g("student", "taps", "ints", base.student.taps),
            g("student", "split", "split", base.student.split),
            inherit=g("student", "inherit", bool, base.student.inherit),
        )
        train = TrainSpec(
            g("train", "epochs", int, base.train.epochs),
            g("train", "batch_size", int, base.train.batch_size),
            g("train", "lr", float, base.train.lr_init),
            g("train", "momentum", float, base.train.momentum),
            g("train", "weight_decay", float, base.train.weight_decay),
            g("train", "schedule", str, base.train.schedule),
            g("train", "seed", int, base.train.seed),
        )
        n_student_taps = len(student.taps)
        mask = g("distill", "mask", str, "1" * max(n_student_taps, 1))
        distill = DistillSpec(
            g("distill", "method", str, base.distill.method),
            g("distill", "r", float, base.distill.r),
            g("distill", "alpha", float, base.distill.alpha),
            g("distill", "beta", float, base.distill.beta),
            mask,
            g("distill", "seed", int, base.distill.seed),
        )
        cfg = ExperimentConfig(
            dataset, teacher, student, train, distill,
            g("experiment", "output_dir", str, base.output_dir),
            g("experiment", "trials", int, base.trials),
            g("experiment", "teacher_checkpoint", str, base.teacher_checkpoint),
        )
    except (ValidationError, ParseError):
        raise
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.trials < 1:
        raise ValidationError("experiment.trials must be >= 1")
    for name, net in (("teacher", cfg.teacher), ("student", cfg.student)):
        n_linear = len(net.hidden) + 1
        if any(h < 1 for h in net.hidden):
            raise ValidationError(f"{name}.hidden widths must be positive")
        if any(not 0 <= t < n_linear for t in net.taps):
            raise ValidationError(f"{name}.taps must index linear layers 0..{n_linear - 1}")
        if any(not 0 <= layer < n_linear or t < 1 for layer, t in net.split):
            raise ValidationError(f"{name}.split entries must be layer:t with valid layer and t >= 1")
    if len(cfg.distill.mask) != len(cfg.student.taps):
        raise ValidationError(
            f"distill.mask has {len(cfg.distill.mask)} entries but the student has {len(cfg.student.taps)} taps"
        )
    t_dims = cfg.teacher.tap_dims(cfg.input_dim, cfg.output_dim)
    s_dims = cfg.student.tap_dims(cfg.input_dim, cfg.output_dim)
    if len(t_dims) != len(s_dims):
        raise ValidationError(f"teacher has {len(t_dims)} taps, student {len(s_dims)}")
    for i, (a, b) in enumerate(zip(t_dims, s_dims)):
        if a != b:
            raise ValidationError(f"tap {i}: teacher width {a} != student width {b} (add a split)")
    return cfg


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Normalized text form; ``parse_config(dump_config(c)) == c``."""
    d, t, s, tr, di = cfg.dataset, cfg.teacher, cfg.student, cfg.train, cfg.distill
    sections = [
        ("dataset", [("kind", d.kind), ("n_train", d.n_train), ("n_test", d.n_test), ("noise", float(d.noise)),
                     ("classes", d.classes), ("seed", d.seed)]),
        ("teacher", [("hidden", t.hidden), ("taps", t.taps), ("seed", t.seed)]),
        ("student", [("hidden", s.hidden), ("taps", s.taps),
                     ("split", ", ".join(f"{a}:{b}" for a, b in s.split)), ("inherit", s.inherit)]),
        ("train", [("epochs", tr.epochs), ("batch_size", tr.batch_size), ("lr", float(tr.lr_init)),
                   ("momentum", float(tr.momentum)), ("weight_decay", float(tr.weight_decay)),
                   ("schedule", tr.schedule), ("seed", tr.seed)]),
        ("distill", [("method", di.method), ("r", float(di.r)), ("alpha", float(di.alpha)),
                     ("beta", float(di.beta)), ("mask", mask_to_str(di.mask)), ("seed", di.seed)]),
        ("experiment", [("output_dir", cfg.output_dir), ("trials", cfg.trials),
                        ("teacher_checkpoint", cfg.teacher_checkpoint)]),
    ]
    lines = []
    for name, items in sections:
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in items)
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply CLI overrides (``None`` means keep) and re-validate."""
    distill_kw = {k: kw[k] for k in ("method", "alpha", "r", "beta", "mask") if kw.get(k) is not None}
    seed = kw.get("seed")
    if seed is not None:
        distill_kw["seed"] = seed
    distill = replace(cfg.distill, **distill_kw) if distill_kw else cfg.distill
    train = replace(cfg.train, seed=seed) if seed is not None else cfg.train
    dataset = cfg.dataset
    if kw.get("dataset_seed") is not None:
        dataset = replace(dataset, seed=kw["dataset_seed"])
    out = replace(cfg, distill=distill, train=train, dataset=dataset)
    if kw.get("trials") is not None:
        out = replace(out, trials=kw["trials"])
    return validate_config(out)


__all__ = ["ExperimentConfig", "NetConfig", "parse_config", "dump_config", "validate_config", "with_overrides"]
