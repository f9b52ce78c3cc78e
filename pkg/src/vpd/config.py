"""Run configuration: a flat key=value file with dotted section keys.

Unknown keys are rejected; command-line overrides win over file values; the
fully resolved mapping is written next to every stage's outputs.
"""

from __future__ import annotations

from pathlib import Path

from .errors import BadConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


# key -> (parser, default)
REGISTRY: dict[str, tuple] = {
    "run.seed": (int, 0),
    "run.threads": (int, 1),
    # synthetic corpus
    "synth.classes": (int, 6),
    "synth.clips_per_class": (int, 17),
    "synth.length": (int, 300),
    "synth.actions_per_clip": (int, 3),
    "synth.fps": (float, 25.0),
    "synth.image_size": (int, 128),
    "synth.seed": (int, 0),
    "synth.azimuth_range": (_parse_floats, (0.0, 6.2832)),
    "synth.elevation_range": (_parse_floats, (0.1, 0.5)),
    "synth.distance_range": (_parse_floats, (4.3, 5.0)),
    "split.train_per_class": (int, 11),
    "split.val_per_class": (int, 2),
    "split.test_per_class": (int, 4),
    # teacher noise
    "noise.sigma": (float, 6.0),
    "noise.corruption_rate": (float, 0.3),
    "noise.baseline_sigma": (float, 1.2),
    "noise.coupling_scale": (float, 10.0),
    "noise.mode_weights": (_parse_floats, (0.5, 0.25, 0.15, 0.1)),
    "noise.speed_coupling": (float, 1.5),
    # teacher pathway
    "teacher.kind": (str, "2d-joints"),
    "teacher.vertical_concat": (_parse_bool, False),
    # view-invariant embedder
    "vipe.embed_dim": (int, 64),
    "vipe.hidden_dims": (_parse_ints, (256, 256)),
    "vipe.margin": (float, 1.0),
    "vipe.loss_weights": (_parse_floats, (1.0, 1.0)),
    "vipe.lr": (float, 1e-3),
    "vipe.batch_size": (int, 128),
    "vipe.epochs": (int, 30),
    "vipe.cameras": (int, 4),
    "vipe.pose_stride": (int, 2),
    "vipe.seed": (int, 0),
    # weak-supervision selection
    "policy.score_threshold": (float, 0.5),
    "policy.validation_fraction": (float, 0.2),
    "policy.seed": (int, 0),
    # student
    "student.preset": (str, "desk"),
    "student.use_motion": (_parse_bool, True),
    "student.lr": (float, 1e-3),
    "student.weight_decay": (float, 0.01),
    "student.batch_size": (int, 100),
    "student.frames_per_epoch": (int, 2000),
    "student.epochs": (int, 60),
    "student.seed": (int, 0),
    "student.flip_prob": (float, 0.5),
    "student.scale_jitter": (float, 0.05),
    "student.brightness_jitter": (float, 0.1),
    "student.pixel_noise_sigma": (float, 0.02),
    "student.background_jitter_sigma": (float, 0.05),
    # classifier / few-shot
    "cls.hidden_dim": (int, 128),
    "cls.epochs": (int, 40),
    "cls.batch_size": (int, 50),
    "cls.lr": (float, 1e-3),
    "cls.normalize_features": (_parse_bool, False),
    "cls.seed": (int, 0),
    "fewshot.ks": (_parse_ints, (8, 16)),
    "fewshot.subsets": (int, 5),
    "fewshot.seed": (int, 0),
    # retrieval
    "retrieve.ks": (_parse_ints, (1, 5)),
    "retrieve.max_queries": (int, 40),
    # detection
    "detect.window": (int, 250),
    "detect.steps": (int, 300),
    "detect.batch_size": (int, 16),
    "detect.lr": (float, 1e-3),
    "detect.folds": (int, 5),
    "detect.threshold": (float, 0.2),
    "detect.train_videos": (int, 5),
    "detect.seed": (int, 0),
    # sweep
    "sweep.thresholds": (_parse_floats, (0.0, 0.5, 0.9)),
}


class RunConfig:
    """Typed flat config with defaults, file loading, and overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {key: default for key, (_, default) in REGISTRY.items()}
        for key, value in (values or {}).items():
            self.set(key, value, raw=False)

    def set(self, key: str, value, raw: bool = True):
        if key not in REGISTRY:
            raise BadConfig(f"unknown config key {key!r}")
        parser, _ = REGISTRY[key]
        try:
            self.values[key] = parser(value) if raw else value
        except (ValueError, TypeError) as exc:
            raise BadConfig(f"bad value for {key}: {value!r} ({exc})") from exc

    def __getitem__(self, key: str):
        if key not in self.values:
            raise BadConfig(f"unknown config key {key!r}")
        return self.values[key]

    def section(self, prefix: str) -> dict:
        return {
            key.split(".", 1)[1]: value
            for key, value in self.values.items()
            if key.startswith(prefix + ".")
        }

    def to_dict(self) -> dict:
        out = {}
        for key, value in sorted(self.values.items()):
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        config = cls()
        if path is not None:
            text = Path(path).read_text()
            for line_no, line in enumerate(text.splitlines(), 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise BadConfig(f"{path}:{line_no}: expected key=value")
                key, _, value = stripped.partition("=")
                config.set(key.strip(), value.strip())
        for item in overrides or []:
            if "=" not in item:
                raise BadConfig(f"override {item!r} must be key=value")
            key, _, value = item.partition("=")
            config.set(key.strip(), value.strip())
        return config

    def dump(self, path) -> None:
        lines = []
        for key, value in sorted(self.values.items()):
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        Path(path).write_text("\n".join(lines) + "\n")
