# coding: utf-8
"""Run configuration: one INI section per pipeline stage."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = ["RunConfig", "SECTIONS", "PROVENANCE", "load_config",
           "dump_config", "parse_config", "format_config"]

import collections
import configparser
import dataclasses
import logging

from ._backbone import BackboneConfig
from ._descriptor import AggregatorConfig
from ._localization import LocalizationConfig
from ._retrieval import RetrievalConfig, WhiteningConfig
from ._training import LossConfig, MiningConfig, TrainingConfig
from .errors import ConfigError


log = logging.getLogger(__name__)

#: INI section name -> RunConfig attribute and dataclass.
SECTIONS = collections.OrderedDict([
    ("backbone", BackboneConfig),
    ("aggregator", AggregatorConfig),
    ("whitening", WhiteningConfig),
    ("loss", LossConfig),
    ("mining", MiningConfig),
    ("training", TrainingConfig),
    ("retrieval", RetrievalConfig),
    ("localization", LocalizationConfig),
])

#: Origin of the published constants, written as comments by dump_config.
PROVENANCE = {
    "backbone.num_heads": "half radial, half cubic window heads",
    "aggregator.tokens": "published: k = 512 pooled tokens",
    "aggregator.fuser_blocks": "published: four 2-layer MLP fuser blocks",
    "aggregator.mixer_tokens": "published: k_bar = 128",
    "aggregator.mixer_channels": "published: d_bar = 4",
    "whitening.dim": "published: 512-dimensional scene descriptor",
    "loss.margin": "published: triplet margin m = 0.1",
    "loss.m_p": "published: positive margin 0.1",
    "loss.m_n": "published: negative margin 2",
    "loss.mu_n": "published: negative weight 1",
    "loss.lambda_local": "local choice, unpublished",
    "loss.exclusion_radius": "local choice, unpublished",
    "loss.sample_set_size": "local choice, unpublished",
    "mining.positive_radius": "published: positives within 5 m",
    "mining.negative_radius": "published: negatives beyond 20 m",
    "mining.subset_size": "published: 1000 queries per subset",
    "mining.num_negatives": "published: 4000 sampled negatives per subset",
    "training.optimizer": "local choice, unpublished",
    "training.learning_rate": "local choice, unpublished",
    "training.max_yaw_deg": "published: rotations up to 30 degrees",
    "training.occlusion_sector_deg": "published: 30 degree sectors removed",
    "retrieval.recall_ks": "published: Recall@1 and Recall@5",
    "retrieval.radii": "published: 5 m and 20 m correctness radii",
    "localization.ratio_tau": "published: edge length ratio 0.8",
    "localization.sigma_c": "local choice, unpublished",
    "localization.rerank_depth": "published: top 20 candidates re-ranked",
    "localization.inlier_threshold": "published: 0.5 m",
    "localization.confidence": "published: RANSAC confidence 0.999",
    "localization.max_iterations": "published: at most 10000 iterations",
    "localization.success_rte": "published: success within 2 m",
    "localization.success_rre": "published: success within 5 degrees",
}


@dataclasses.dataclass
class RunConfig(object):
    """Every tunable of the pipeline."""

    backbone: BackboneConfig = dataclasses.field(
        default_factory=BackboneConfig)
    aggregator: AggregatorConfig = dataclasses.field(
        default_factory=AggregatorConfig)
    whitening: WhiteningConfig = dataclasses.field(
        default_factory=WhiteningConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    mining: MiningConfig = dataclasses.field(default_factory=MiningConfig)
    training: TrainingConfig = dataclasses.field(
        default_factory=TrainingConfig)
    retrieval: RetrievalConfig = dataclasses.field(
        default_factory=RetrievalConfig)
    localization: LocalizationConfig = dataclasses.field(
        default_factory=LocalizationConfig)
    seed: int = 0
    threads: int = 0

    def validate(self):
        """
        Check every section and the cross-section invariants.

        The aggregator takes its token width from ``backbone.channels``, so
        the two stages always agree on it; the backbone section checks that
        the heads split evenly between radial and cubic attention and
        across the channels. A whitening dimension above the mixer output
        is accepted with a warning and clamped when the whitener is fitted.

        :raises ConfigError: On the first invalid setting.
        """
        # type: () -> None

        for name in SECTIONS:
            getattr(self, name).validate()
        if (self.whitening.enabled
                and self.whitening.dim > self.aggregator.output_dim):
            log.warning("whitening.dim %d exceeds the %d-dimensional mixer "
                        "output and will be clamped", self.whitening.dim,
                        self.aggregator.output_dim)
        if self.retrieval.top_k < self.localization.rerank_depth:
            raise ConfigError("retrieval.top_k {} is smaller than the "
                              "re-ranking depth {}".format(
                                  self.retrieval.top_k,
                                  self.localization.rerank_depth))
        if self.threads < 0:
            raise ConfigError("run.threads must be >= 0")


def _format_value(value):
    """Render a field value so that parsing it back is exact."""
    # type: (object) -> str

    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(text, default, where):
    """Parse `text` with the type of `default`."""
    # type: (str, object, str) -> object

    try:
        if isinstance(default, bool):
            lowered = text.strip().lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError("not a boolean: {!r}".format(text))
            return lowered in ("true", "yes", "1")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split(",") if v.strip())
        return type(default)(text.strip())
    except ValueError as error:
        raise ConfigError("{}: {}".format(where, error))


def _apply_section(target, items, section):
    """Set the dataclass fields of `target` from ``(key, text)`` items."""
    names = {f.name for f in dataclasses.fields(target)}
    for key, text in items:
        if key not in names:
            raise ConfigError("unknown key {}.{}".format(section, key))
        where = "{}.{}".format(section, key)
        setattr(target, key, _parse_value(text, getattr(target, key), where))


def parse_config(text, source="<string>"):
    """
    Build a :class:`RunConfig` from INI text; missing keys keep defaults.

    :raises ConfigError: For unknown sections or keys and bad values.
    """
    # type: (str, str) -> RunConfig

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as error:
        raise ConfigError(str(error))
    config = RunConfig()
    for section in parser.sections():
        items = list(parser.items(section))
        if section == "run":
            _apply_section(config, [(k, v) for k, v in items
                                    if k in ("seed", "threads")], "run")
            extra = [k for k, _ in items if k not in ("seed", "threads")]
            if extra:
                raise ConfigError("unknown key run.{}".format(extra[0]))
        elif section in SECTIONS:
            _apply_section(getattr(config, section), items, section)
        else:
            raise ConfigError("unknown section [{}]".format(section))
    config.validate()
    return config


def format_config(config):
    """Render `config` as commented INI text."""
    # type: (RunConfig) -> str

    lines = ["# SALSA run configuration", ""]
    lines += ["[run]", "seed = {}".format(config.seed),
              "threads = {}".format(config.threads), ""]
    for section in SECTIONS:
        lines.append("[{}]".format(section))
        values = getattr(config, section)
        for field in dataclasses.fields(values):
            note = PROVENANCE.get("{}.{}".format(section, field.name))
            if note:
                lines.append("# {}".format(note))
            lines.append("{} = {}".format(
                field.name, _format_value(getattr(values, field.name))))
        lines.append("")
    return "\n".join(lines)


def load_config(filesystem, path):
    """
    Read a configuration file.

    :raises fs.errors.ResourceNotFound: When `path` does not exist.
    :raises ConfigError: For invalid content.
    """
    # type: (FS, str) -> RunConfig

    config = parse_config(filesystem.readtext(path), path)
    log.debug("loaded configuration from %s", path)
    return config


def dump_config(filesystem, path, config=None):
    """Write `config` (defaults when omitted) with provenance comments."""
    # type: (FS, str, RunConfig) -> None

    filesystem.writetext(path, format_config(config or RunConfig()))
