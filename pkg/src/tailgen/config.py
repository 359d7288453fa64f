"""Run configuration: flat ``section.key = value`` text with dotted names.

Values are JSON literals (``3``, ``0.5``, ``true``, ``"text"``); a value that
isn't valid JSON is taken as a bare string. ``#`` starts a comment line.
Precedence: command-line flags > config file > defaults below.
"""
import json
import os

from .errors import ConfigError

# key -> (default, help). The default's type is the accepted type; keys whose
# default is "auto" also accept a number.
DEFAULTS = {
    "run.seed": (0, "root seed; every component seed is derived from it"),
    "run.out": ("runs/default", "output directory (all outputs go here)"),

    "data.preset": ("tri-gauss", "tri-gauss | csv | idx"),
    "data.n": (3000, "number of generated samples"),
    "data.test_fraction": (0.2, "held-out fraction"),
    "data.leave_out": (0, "class to hold out as the anomaly (0 = none)"),
    "data.csv": ("", "labelled CSV used when data.preset = csv"),
    "data.idx_images": ("", "IDX image file used when data.preset = idx"),
    "data.idx_labels": ("", "IDX label file used when data.preset = idx"),

    "flow.layers": (6, "number of coupling layers"),
    "flow.hidden": (64, "hidden width of the scale/shift nets"),
    "flow.max_log_scale": (4.0, "bound on the per-coordinate log-scale"),
    "flow.init": ("identity", "identity | random"),
    "flow.init_scale": (0.1, "output-layer std for random init"),
    "flow_opt.method": ("adam", "sgd | adam"),
    "flow_opt.step_size": (1e-3, ""),
    "flow_opt.beta1": (0.9, ""),
    "flow_opt.beta2": (0.999, ""),
    "flow_opt.eps": (1e-8, ""),
    "flow_opt.max_epochs": (200, ""),
    "flow_opt.batch_size": (256, ""),
    "flow_opt.schedule": ("constant", "constant | cosine"),

    "tail.init": ("from_density", "from_density | random"),
    "tail.arch": ("auto", "auto | coupling | flow_head | mlp | residual"),
    "tail.hidden": (64, "hidden width of the feed-forward head"),
    "tail.depth": (3, "layers in the feed-forward head"),
    "tail_opt.method": ("adam", "sgd | adam"),
    "tail_opt.step_size": (1e-3, ""),
    "tail_opt.beta1": (0.9, ""),
    "tail_opt.beta2": (0.999, ""),
    "tail_opt.eps": (1e-8, ""),
    "tail_opt.max_epochs": (200, ""),
    "tail_opt.patience": (10, "epochs without relative improvement > tol before stopping"),
    "tail_opt.tol": (1e-4, ""),
    "tail_opt.schedule": ("constant", "constant | cosine"),

    "loss.w_d": (0.01, "distance weight"),
    "loss.w_e": ("auto", "entropy weight; auto puts the target density level at epsilon"),
    "loss.w_sc": (1e-4, "scattering weight"),
    "loss.p": (2.0, "norm order"),
    "loss.q": (2.0, "power of the scattering norms"),
    "loss.N": (512, "latent batch size"),
    "loss.M": (0, "reference sample size (0 = all rows)"),
    "loss.log_domain": (False, "use mean log-density for the probability term"),
    "loss.distance_target": ("data", "data | flow"),

    "score.epsilon": ("auto", "support threshold; auto = value stored with the density"),
    "score.quantile": (0.05, "density quantile over training data that defines epsilon"),
    "score.alpha_density": (1.0, "weight of -log density (nats)"),
    "score.alpha_distance": (10.0, "weight of the nearest-sample distance (data units)"),
    "score.p": (2.0, ""),

    "ood.mode": ("shift", "shift | uniform_box"),
    "ood.magnitude": (4.2, "shift length or box inflation"),
    "ood.n": (0, "rows for uniform_box (0 = as many as the input)"),
    "ood.name": ("ood", "output file stem"),

    "eval.n_boundary": (1000, "boundary samples for the proximity summary"),
    "eval.paired_floor": (False, "pair j-th samples only when computing the inter-class floor"),

    "io.density": ("", "flow checkpoint"),
    "io.tail": ("", "tail checkpoint"),
    "io.data": ("", "training CSV for train-tail (default: train.csv beside the density)"),
    "io.input": ("", "input CSV for score / make-ood"),
    "io.reference": ("", "reference CSV for distances (default: train.csv beside the density)"),
    "io.datasets": ("", "comma-separated name=path list for evaluate; the first is the normal set"),
    "io.n": (1000, "rows to generate"),
}

PATH_KEYS = {"io.density", "io.tail", "io.data", "io.input", "io.reference",
             "data.csv", "data.idx_images", "data.idx_labels", "run.out"}


def _coerce(key, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key][0]
    if default == "auto" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value) if key != "tail.arch" else _bad(key, value)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(value, str):
        return value
    return _bad(key, value)


def _bad(key, value):
    raise ConfigError(f"bad value {value!r} for {key} (expected {type(DEFAULTS[key][0]).__name__})")


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    """Resolved settings; ``cfg["loss.w_d"]`` style access."""

    def __init__(self, values=None):
        self.values = {k: v[0] for k, v in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def update_from_text(self, text, source="<config>"):
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            self.set(key, parse_value(val))

    def load(self, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        self.update_from_text(text, path)

    def absolutize(self):
        """Turn every non-empty path value into an absolute path."""
        for k in PATH_KEYS:
            if self.values[k]:
                self.values[k] = os.path.abspath(self.values[k])
        if self.values["io.datasets"]:
            parts = []
            for name, path in parse_datasets(self.values["io.datasets"]):
                parts.append(f"{name}={os.path.abspath(path)}")
            self.values["io.datasets"] = ",".join(parts)

    def dumps(self):
        lines = ["# effective configuration; replay with --config"]
        for k in DEFAULTS:
            lines.append(f"{k} = {json.dumps(self.values[k])}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def parse_datasets(spec):
    out = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        if "=" not in item:
            raise ConfigError(f"dataset entry {item!r} must look like name=path")
        name, _, path = item.partition("=")
        out.append((name.strip(), path.strip()))
    return out
