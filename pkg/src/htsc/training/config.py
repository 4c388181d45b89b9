"""
Flat dotted-key configuration with profiles, TOML files and CLI overrides.
"""

import logging
import math
import tomllib

from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, Final, Iterator, List, Mapping, Optional, Self, Union

from ..utils.errors import ConfigError
from ..utils.utils import canonical_json, sha256_bytes


__all__: Final[List[str]] = [
    "Config",
    "ConfigBuilder",
    "DEFAULTS",
    "PROFILES",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


DEFAULTS: Final[Mapping[str, Any]] = MappingProxyType(
    {
        "seed": 0,
        # Synthetic corpus
        "data.image_size": 32,
        "data.channels": 1,
        "data.patch": 4,
        "data.pos_rows": 4,
        "data.min_entities": 1,
        "data.max_entities": 3,
        "data.vocab_size": 128,
        "data.n_max": 40,
        "data.train": 512,
        "data.val": 64,
        "data.test": 64,
        "data.noise": 0.05,
        "data.background": 0.1,
        "data.confound_fraction": 0.0,
        "data.confound_pair": [0, 1],
        "data.entity_weights": [],
        "data.unique_scenes": False,
        "data.grammar_version": 1,
        # Model dimensions
        "model.width": 64,
        "model.heads": 4,
        "model.enc_blocks": 2,
        "model.dec_blocks": 2,
        "model.ffn_mult": 2,
        "model.dropout": 0.0,
        # Low level
        "eclo.Q": 12,
        "eclo.P": 16,
        "eclo.M": 7,
        "eclo.cls_form": "full",
        "eclo.loc_form": "infonce",
        # Mid level
        "mim.rate": 0.85,
        "plm.no_vision_prob": 0.1,
        # High level
        "vdm.k": 0,
        "vdm.accum": "sum",
        "vdm.concat": "feature",
        "nwgm.queries": 4,
        "decode.mode": "greedy",
        "decode.beam_size": 3,
        # Stage 1
        "train.lambda": 0.25,
        "train.batch_size": 16,
        "train.lr": 5e-4,
        "train.weight_decay": 1e-2,
        "train.epochs": 20,
        "train.warmup_steps": 0,
        "train.debug": False,
        # Stage 2
        "stage2.lr": 1e-5,
        "stage2.weight_decay": 5e-5,
        "stage2.epochs": 10,
        "stage2.freeze_shared": False,
        # Ablation switches
        "levels.low": True,
        "levels.mid": True,
        "levels.high": True,
        "mediators.vdm": True,
        "mediators.ldm": True,
    }
)

PROFILES: Final[Mapping[str, Mapping[str, Any]]] = MappingProxyType(
    {
        "desk": MappingProxyType({}),
        "large": MappingProxyType(
            {
                "data.image_size": 224,
                "data.patch": 16,
                "data.pos_rows": 3,
                "data.vocab_size": 256,
                "data.n_max": 100,
                "model.width": 512,
                "model.heads": 8,
                "eclo.Q": 75,
                "eclo.P": 51,
                "train.epochs": 30,
            }
        ),
    }
)

_CHOICES: Final[Mapping[str, tuple]] = MappingProxyType(
    {
        "eclo.cls_form": ("full", "literal"),
        "eclo.loc_form": ("infonce", "literal"),
        "vdm.accum": ("sum", "product"),
        "vdm.concat": ("feature", "token"),
        "decode.mode": ("greedy", "beam"),
    }
)


def _flatten(
    table: Mapping[str, Any],
    prefix: str = "",
) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in table.items():
        path: str = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{path}."))
        else:
            flat[path] = value
    return flat


def _coerce(
    key: str,
    value: Any,
) -> Any:
    default: Any = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


class Config:
    """
    Config class.

    An immutable mapping of dotted keys to values. Build instances through
    ConfigBuilder, or Config.profile() for the stock profiles.
    """

    def __init__(
        self,
        values: Mapping[str, Any],
    ) -> None:
        """
        Initialize the Config object.

        :param values: Every key of DEFAULTS with a validated value.
        :type values: Mapping[str, Any]

        :return: None
        :rtype: None
        """

        # Store a read-only copy of the values
        self._values: Final[Mapping[str, Any]] = MappingProxyType(dict(values))

    def __repr__(self) -> str:
        return f"Config(hash={self.hash()[:12]}, keys={len(self._values)})"

    def __str__(self) -> str:
        return self.__repr__()

    def __getitem__(self, key: str) -> Any:
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Config) and dict(self._values) == dict(other._values)

    def __hash__(self) -> int:
        return hash(self.hash())

    @classmethod
    def profile(
        cls,
        name: str = "desk",
    ) -> "Config":
        """
        Return a stock profile ("desk" or "large").

        :raises ConfigError: If the profile name is unknown.
        """

        return ConfigBuilder().profile(name).build()

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[List[str]] = None,
        profile: str = "desk",
    ) -> "Config":
        """
        Layer profile defaults, an optional TOML file and key=value overrides.

        :param path: Optional TOML file.
        :type path: Optional[Union[str, Path]]
        :param overrides: Optional "key=value" strings.
        :type overrides: Optional[List[str]]
        :param profile: The base profile.
        :type profile: str

        :return: The validated configuration.
        :rtype: Config
        """

        builder: ConfigBuilder = ConfigBuilder().profile(profile)
        if path is not None:
            builder.file(path)
        for item in overrides or []:
            builder.set_string(item)
        return builder.build()

    def get(self, key: str, default: Any = None) -> Any:
        return self._values.get(key, default)

    def dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def hash(self) -> str:
        """
        Return the SHA-256 of the canonical JSON of all keys.
        """

        return sha256_bytes(canonical_json(dict(self._values)).encode("utf-8"))

    def replace(self, **changes: Any) -> "Config":
        """
        Return a copy with changed keys; dots in keys are written as "__",
        e.g. replace(train__lambda=0.5).
        """

        builder: ConfigBuilder = ConfigBuilder().update(self._values)
        for key, value in changes.items():
            builder.set(key.replace("__", "."), value)
        return builder.build()

    def with_values(self, values: Mapping[str, Any]) -> "Config":
        return ConfigBuilder().update(self._values).update(values).build()

    # Derived quantities

    @property
    def grid(self) -> int:
        return self["data.image_size"] // self["data.patch"]

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self["data.patch"] * self["data.patch"] * self["data.channels"]

    @property
    def pos_cols(self) -> int:
        return self["eclo.P"] // self["data.pos_rows"]

    @property
    def local_k(self) -> int:
        """
        Number of locally selected tokens; vdm.k = 0 means ceil(N / 8).
        """

        return self["vdm.k"] if self["vdm.k"] > 0 else math.ceil(self.num_patches / 8)


class ConfigBuilder:
    """
    ConfigBuilder class.

    Accumulates configuration layers (profile, file, single keys) and
    validates the result in build().
    """

    def __init__(self) -> None:
        """
        Initialize the ConfigBuilder object.

        :return: None
        :rtype: None
        """

        self._configuration: Dict[str, Any] = dict(DEFAULTS)

    def __repr__(self) -> str:
        return f"ConfigBuilder(keys={len(self._configuration)})"

    def profile(
        self,
        name: str,
    ) -> Self:
        """
        Apply a stock profile on top of the defaults.

        :raises ConfigError: If the profile is unknown.
        """

        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
        return self.update(PROFILES[name])

    def set(
        self,
        key: str,
        value: Any,
    ) -> Self:
        """
        Set one key.

        :param key: The dotted key.
        :type key: str
        :param value: The value; its type must match the default's.
        :type value: Any

        :return: The ConfigBuilder object.
        :rtype: ConfigBuilder

        :raises ConfigError: If the key is unknown or the type is wrong.
        """

        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")

        # Store the coerced value
        self._configuration[key] = _coerce(key, value)

        # Return the ConfigBuilder object
        return self

    def set_string(
        self,
        item: str,
    ) -> Self:
        """
        Set one key from a "key=value" string; the value is parsed as a TOML
        value and falls back to a bare string.
        """

        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        try:
            value: Any = tomllib.loads(f"value = {raw}")["value"]
        except tomllib.TOMLDecodeError:
            value = raw
        return self.set(key, value)

    def update(
        self,
        values: Mapping[str, Any],
    ) -> Self:
        for key, value in values.items():
            self.set(key, value)
        return self

    def file(
        self,
        path: Union[str, Path],
    ) -> Self:
        """
        Apply a TOML file; nested tables are flattened to dotted keys.

        :raises ConfigError: If the file is missing or not valid TOML.
        """

        try:
            with open(path, "rb") as handle:
                table: Dict[str, Any] = tomllib.load(handle)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        logger.debug("applying config file %s", path)
        return self.update(_flatten(table))

    def build(self) -> Config:
        """
        Validate the accumulated values and return the Config.

        :raises ConfigError: If any value is out of range or inconsistent.
        """

        c: Dict[str, Any] = self._configuration

        def require(condition: bool, message: str) -> None:
            if not condition:
                raise ConfigError(message)

        for key, choices in _CHOICES.items():
            require(c[key] in choices, f"{key} must be one of {choices}, got {c[key]!r}")

        require(0.0 <= c["train.lambda"] <= 1.0, "train.lambda must lie in [0, 1]")
        require(0.0 < c["mim.rate"] < 1.0, "mim.rate must lie in (0, 1)")
        require(0.0 <= c["plm.no_vision_prob"] <= 1.0, "plm.no_vision_prob must lie in [0, 1]")
        require(0.0 <= c["data.confound_fraction"] <= 1.0, "data.confound_fraction must lie in [0, 1]")
        require(0.0 <= c["model.dropout"] < 1.0, "model.dropout must lie in [0, 1)")

        require(c["data.image_size"] > 0 and c["data.patch"] > 0, "image and patch sizes must be positive")
        require(c["data.image_size"] % c["data.patch"] == 0, "data.image_size must be divisible by data.patch")
        grid: int = c["data.image_size"] // c["data.patch"]
        require(grid % 2 == 0, f"the patch grid ({grid}) must be even for 2x2 pooling")
        require(c["data.channels"] >= 1, "data.channels must be positive")

        require(c["eclo.Q"] >= 1 and c["eclo.P"] >= 1, "eclo.Q and eclo.P must be positive")
        require(c["data.pos_rows"] >= 1 and c["eclo.P"] % c["data.pos_rows"] == 0, "eclo.P must be divisible by data.pos_rows")
        require(c["eclo.M"] >= 1, "eclo.M must be positive")
        require(
            not c["levels.low"] or c["eclo.M"] < c["eclo.P"],
            "eclo.M must be smaller than eclo.P when levels.low is on",
        )
        require(
            1 <= c["data.min_entities"] <= c["data.max_entities"],
            "need 1 <= data.min_entities <= data.max_entities",
        )
        require(
            c["data.confound_fraction"] == 0.0
            or (
                len(c["data.confound_pair"]) == 2
                and c["data.confound_pair"][0] != c["data.confound_pair"][1]
                and all(0 <= e < c["eclo.Q"] for e in c["data.confound_pair"])
            ),
            "data.confound_pair must name two distinct entity ids",
        )
        require(
            not c["data.entity_weights"] or len(c["data.entity_weights"]) == c["eclo.Q"],
            "data.entity_weights must be empty or have eclo.Q entries",
        )
        require(all(w >= 0 for w in c["data.entity_weights"]), "data.entity_weights must be non-negative")
        require(min(c["data.train"], c["data.val"], c["data.test"]) >= 0, "split sizes must be non-negative")

        require(c["model.width"] % c["model.heads"] == 0, "model.width must be divisible by model.heads")
        require(c["model.enc_blocks"] >= 1 and c["model.dec_blocks"] >= 1, "block counts must be positive")
        require(c["nwgm.queries"] >= 1, "nwgm.queries must be positive")
        require(c["decode.beam_size"] >= 1, "decode.beam_size must be positive")
        require(c["train.batch_size"] >= 1, "train.batch_size must be positive")
        require(c["vdm.k"] <= grid * grid, f"vdm.k exceeds the {grid * grid} patch tokens")
        require(c["vdm.k"] >= 0, "vdm.k must be non-negative")

        return Config(c)
