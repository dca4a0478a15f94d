"""Pipeline configuration and its key-value file format.

The config file is a flat TOML-like subset: ``key = value`` lines grouped
under optional ``[section]`` headers, full-line ``#`` comments, values being
quoted strings, booleans, ints or floats. That covers everything the
pipeline needs without pulling in a TOML dependency on Python 3.10.
"""

from dataclasses import dataclass, field, fields

from ..features import FeatTrainConfig
from ..instantiate import GridParams
from ..scene_sim import SimConfig
from ..weak_classify import ClsTrainConfig

FIELD_SOURCES = ("gt", "noisy_oracle", "external")
FLOW_SOURCES = ("gt", "block_match")
WEAK_MODES = ("frame_wise", "sequence_wise")
LABEL_MODES = ("auto", "human")


@dataclass
class PipelineConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    grid: GridParams = field(default_factory=GridParams)
    feat: FeatTrainConfig = field(default_factory=FeatTrainConfig)
    cls: ClsTrainConfig = field(default_factory=ClsTrainConfig)
    n_sequences: int = 4
    field_source: str = "gt"
    sigma_px: float = 2.0
    boundary_iters: int = 3
    flow_source: str = "gt"
    max_dist: float = 40.0
    n_km: int = 8
    weak_mode: str = "frame_wise"
    label_mode: str = "auto"
    seed: int = 0

    def validate(self):
        self.sim.validate()
        self.grid.validate((self.sim.H, self.sim.W))
        if self.n_sequences < 1:
            raise ValueError("need at least one sequence")
        if self.field_source not in FIELD_SOURCES:
            raise ValueError("field_source must be one of %s"
                             % (FIELD_SOURCES,))
        if self.flow_source not in FLOW_SOURCES:
            raise ValueError("flow_source must be one of %s" % (FLOW_SOURCES,))
        if self.weak_mode not in WEAK_MODES:
            raise ValueError("weak_mode must be one of %s" % (WEAK_MODES,))
        if self.label_mode not in LABEL_MODES:
            raise ValueError("label_mode must be one of %s" % (LABEL_MODES,))
        if self.n_km < 1:
            raise ValueError("n_km must be positive")
        if self.sigma_px < 0 or self.boundary_iters < 0:
            raise ValueError("noise parameters must be non-negative")
        return self

    @property
    def class_names(self):
        return ["tool %d" % i for i in range(self.sim.n_classes)]

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _SECTIONS:
                out[f.name] = {g.name: getattr(v, g.name)
                               for g in fields(type(v))}
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data):
        sections = {"": {}}
        for key, value in data.items():
            if isinstance(value, dict):
                sections[key] = dict(value)
            else:
                sections[""][key] = value
        return apply_settings(cls(), sections)


_SECTIONS = {"sim": SimConfig, "grid": GridParams,
             "feat": FeatTrainConfig, "cls": ClsTrainConfig}


def _parse_value(text, where):
    text = text.strip()
    if not text:
        raise ValueError("missing value %s" % where)
    if text[0] in "\"'":
        if len(text) < 2 or text[-1] != text[0]:
            raise ValueError("unterminated string %s" % where)
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ValueError("cannot parse value %r %s" % (text, where)) from None


def parse_config_text(text):
    """Sectioned key=value text -> {section: {key: value}}, top level ''."""
    out = {"": {}}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = "at line %d" % lineno
        if line.startswith("["):
            if not line.endswith("]"):
                raise ValueError("malformed section header %s" % where)
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ValueError("expected key = value %s" % where)
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError("empty key %s" % where)
        out[section][key] = _parse_value(value, where)
    return out


def apply_settings(cfg, sections):
    """Overlay {section: {key: value}} onto a PipelineConfig in place.

    Top-level keys address PipelineConfig scalars; section names address the
    nested dataclasses. Unknown keys are rejected so typos do not silently
    fall back to defaults.
    """
    for section, values in sections.items():
        if section == "":
            target = cfg
            names = {f.name for f in fields(PipelineConfig)} - set(_SECTIONS)
        elif section in _SECTIONS:
            target = getattr(cfg, section)
            names = {f.name for f in fields(_SECTIONS[section])}
        else:
            raise ValueError("unknown config section [%s]" % section)
        for key, value in values.items():
            if key not in names:
                raise ValueError("unknown config key %r in section [%s]"
                                 % (key, section))
            setattr(target, key, value)
    return cfg


def load_config(path):
    with open(path) as fh:
        sections = parse_config_text(fh.read())
    return apply_settings(PipelineConfig(), sections)
