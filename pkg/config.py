from __future__ import annotations
import configparser
import hashlib
import os
from typing import Optional

DEFAULT_SEED = 7
SEED_ENV = "RCC_SEED"


class Config:

    def __init__(self, filename: Optional[str] = None):
        self.filename = filename
        self.config = configparser.ConfigParser()
        if filename is not None:
            if not os.path.exists(filename):
                raise ValueError(f"Configuration file `{filename}` does not exist.")
            self.config.read(filename, encoding="utf-8")

        self.PipelineConfig = self.Pipeline(
            seed=self.config.getint('pipeline', 'seed', fallback=None),
            workers=self.config.getint('pipeline', 'workers', fallback=1)
        )

        self.ImagingConfig = self.Imaging(
            white_threshold=self.config.getint('imaging', 'white_threshold', fallback=220),
            patch_size=self.config.getint('imaging', 'patch_size', fallback=1024),
            min_tissue=self.config.getfloat('imaging', 'min_tissue', fallback=0.25),
            positive_area=self.config.getfloat('imaging', 'positive_area', fallback=0.05)
        )

        self.MilConfig = self.Mil(
            attention_dim=self.config.getint('mil', 'attention_dim', fallback=16),
            hidden_dim=self.config.getint('mil', 'hidden_dim', fallback=16),
            learning_rate=self.config.getfloat('mil', 'learning_rate', fallback=1e-3),
            weight_decay=self.config.getfloat('mil', 'weight_decay', fallback=1e-5),
            epochs=self.config.getint('mil', 'epochs', fallback=50)
        )

        self.MetricsConfig = self.Metrics(
            bootstrap=self.config.getint('metrics', 'bootstrap', fallback=2000)
        )

        self.NomogramConfig = self.Nomogram(
            horizon=self.config.getfloat('nomogram', 'horizon', fallback=60.0)
        )

    def resolve_seed(self, flag: Optional[int] = None) -> int:
        """
        Seed from the flag, else the config file, else the RCC_SEED environment variable, else 7
        """
        if flag is not None:
            return flag
        if self.PipelineConfig.seed is not None:
            return self.PipelineConfig.seed
        env = os.environ.get(SEED_ENV)
        if env:
            try:
                return int(env)
            except ValueError:
                raise ValueError(f"{SEED_ENV} must be an integer, got `{env}`")
        return DEFAULT_SEED

    def settings(self) -> dict[str, str]:
        """
        Effective settings as `section.key` -> text
        """
        flat = {}
        for section_name, section in (("pipeline", self.PipelineConfig), ("imaging", self.ImagingConfig),
                                      ("mil", self.MilConfig), ("metrics", self.MetricsConfig),
                                      ("nomogram", self.NomogramConfig)):
            for key, value in vars(section).items():
                flat[f"{section_name}.{key}"] = repr(value)
        return flat

    def digest(self) -> str:
        """
        SHA-256 of the effective settings
        """
        text = "\n".join(f"{key}={value}" for key, value in sorted(self.settings().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    class Pipeline:
        def __init__(self, seed: Optional[int], workers: int):
            self.seed: Optional[int] = seed
            self.workers: int = workers

            if self.workers < 1:
                raise ValueError("pipeline.workers must be at least 1.")

    class Imaging:
        def __init__(self,
                     white_threshold: int,
                     patch_size: int,
                     min_tissue: float,
                     positive_area: float):
            self.white_threshold: int = white_threshold
            self.patch_size: int = patch_size
            self.min_tissue: float = min_tissue
            self.positive_area: float = positive_area

            if not 0 <= self.white_threshold <= 255:
                raise ValueError("imaging.white_threshold must lie within 0..255.")
            if self.patch_size < 1:
                raise ValueError("imaging.patch_size must be at least 1.")
            if not 0.0 <= self.min_tissue <= 1.0:
                raise ValueError("imaging.min_tissue must lie within [0, 1].")
            if not 0.0 <= self.positive_area < 1.0:
                raise ValueError("imaging.positive_area must lie within [0, 1).")

    class Mil:
        def __init__(self,
                     attention_dim: int,
                     hidden_dim: int,
                     learning_rate: float,
                     weight_decay: float,
                     epochs: int):
            self.attention_dim: int = attention_dim
            self.hidden_dim: int = hidden_dim
            self.learning_rate: float = learning_rate
            self.weight_decay: float = weight_decay
            self.epochs: int = epochs

            if self.attention_dim < 1 or self.hidden_dim < 1:
                raise ValueError("mil.attention_dim and mil.hidden_dim must be at least 1.")
            if self.learning_rate < 0 or self.weight_decay < 0:
                raise ValueError("mil.learning_rate and mil.weight_decay must not be negative.")
            if self.epochs < 0:
                raise ValueError("mil.epochs must not be negative.")

    class Metrics:
        def __init__(self, bootstrap: int):
            self.bootstrap: int = bootstrap

            if self.bootstrap < 100:
                raise ValueError("metrics.bootstrap must be at least 100.")

    class Nomogram:
        def __init__(self, horizon: float):
            self.horizon: float = horizon

            if self.horizon <= 0:
                raise ValueError("nomogram.horizon must be positive.")
