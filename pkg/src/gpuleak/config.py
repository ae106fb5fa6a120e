"""INI experiment configuration with typed defaults.

Every key has a default; its type is the default's type. Unknown sections
or keys are rejected so typos fail loudly. Command-line flags override the
file, which overrides the defaults.
"""
from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field

from .covert import AlignmentConfig, NoiseProfile
from .probe import ProbeConfig
from .scenario import Layout
from .sidechan import MonitorConfig
from .simcore import CacheConfig, LatencyModel, Topology, build_topology, symmetric
from .simcore.topology import DGX1_LINKS
from .workloads import APPLICATIONS, WorkloadSpec, _DEFAULTS as WORKLOAD_DEFAULTS

MiB = 1 << 20

DEFAULTS: dict[str, dict] = {
    "sim": {"seed": 0, "quantum_cycles": 2000, "target_gpu": 0, "spy_gpu": 1, "alloc_bytes": 16 * MiB},
    "topology": {"num_gpus": 8, "dram_bytes": 16 * 1024 * MiB, "page_bytes": 64 * 1024, "links": "dgx1"},
    "cache": {"line_bytes": 128, "num_sets": 2048, "ways": 16, "policy": "lru"},
    "latency": {
        "local_l2_hit_mean": 270.0, "local_l2_hit_sigma": 12.0,
        "local_dram_mean": 470.0, "local_dram_sigma": 25.0,
        "remote_l2_hit_mean": 650.0, "remote_l2_hit_sigma": 20.0,
        "remote_dram_mean": 850.0, "remote_dram_sigma": 30.0,
        "contention_coeff": 8.0, "sigma_scale": 1.0,
    },
    "probe": {"num_access_repeats": 4, "kernel_repeats": 20, "search_budget": -1, "votes": 5,
              "skip_block": 8, "samples": 240, "target_offset": 0, "count": 1, "trials": 10},
    "covert": {"pairs": "1,2,4,8,16", "message": "Hello! How are you? ", "random_bits": 4096,
               "slot_cycles": 40000, "prime_reps": 1, "background_intensity": 0.0,
               "trojan_probe_loops": 400, "spy_probe_loops": 150, "margin_cycles": 50.0},
    "sidechan": {"monitored_sets": 64, "num_epochs": 32, "epoch_cycles": 50000, "noise_intensity": 0.0,
                 "exclusive": False, "selection": "spread", "train_per_label": 50, "test_per_label": 20,
                 "labels": ",".join(APPLICATIONS)},
    "workload": {"kind": "vectoradd", "seed": 0, "params": ""},
    "mlp": {"sizes": "64,128,256,512", "calibration_runs": 3, "test_runs": 5, "epochs": 1,
            "monitored_sets": 32, "epoch_cycles": 400000},
}


class ConfigError(ValueError):
    pass


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    # double quotes keep leading or trailing spaces
    if len(raw) >= 2 and raw[0] == raw[-1] == '"':
        return raw[1:-1]
    return raw


def _quote(v) -> str:
    if isinstance(v, str) and (v != v.strip() or v.startswith('"')):
        return f'"{v}"'
    return str(v)


def int_list(text: str, where: str = "list") -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{where}: expected comma-separated integers, got {text!r}") from None


def parse_params(text: str, kind: str) -> dict:
    """``key=value,key=value`` with values typed like the workload defaults."""
    out = {}
    defaults = WORKLOAD_DEFAULTS.get(kind, {})
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"workload.params: expected key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in defaults:
            raise ConfigError(f"workload.params: unknown {kind} parameter {k!r}")
        out[k] = _convert(v, defaults[k], f"workload.params.{k}")
    return out


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def load(cls, path: str | None = None, text: str | None = None) -> "ExperimentConfig":
        cfg = cls()
        if path is None and text is None:
            return cfg
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        cp.optionxform = str
        try:
            if path is not None:
                with open(path) as fh:
                    cp.read_file(fh)
            else:
                cp.read_string(text)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(str(exc)) from exc
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in cp.items(section):
                cfg.set(section, key, raw)
        cfg.validate()
        return cfg

    def set(self, section: str, key: str, raw) -> None:
        if key not in DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown key {section}.{key}")
        default = DEFAULTS[section][key]
        self.values[section][key] = _convert(raw, default, f"{section}.{key}") if isinstance(raw, str) else raw

    def apply_flags(self, seed=None, pairs=None, noise=None) -> None:
        if seed is not None:
            self.values["sim"]["seed"] = int(seed)
        if pairs is not None:
            self.values["covert"]["pairs"] = str(int(pairs))
        if noise is not None:
            self.values["latency"]["sigma_scale"] = float(noise)
            if float(noise) == 0.0:
                self.values["latency"]["contention_coeff"] = 0.0
        self.validate()

    def validate(self) -> None:
        try:
            self.topology()
            self.latency()
            self.probe()
            self.alignment()
            self.monitor()
            self.mlp_sizes()
            self.workload()
            for p in self.pairs():
                if p < 1:
                    raise ConfigError("covert.pairs must be positive")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # builders ---------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.values["sim"]["seed"]

    def cache(self) -> CacheConfig:
        c = self.values["cache"]
        return CacheConfig(c["line_bytes"], c["num_sets"], c["ways"], c["policy"])

    def topology(self) -> Topology:
        t = self.values["topology"]
        links = t["links"].strip()
        if links == "dgx1":
            pairs = DGX1_LINKS if t["num_gpus"] == 8 else None
            if pairs is None:
                raise ConfigError("links = dgx1 needs num_gpus = 8")
        elif links == "full":
            pairs = [(a, b) for a in range(t["num_gpus"]) for b in range(a + 1, t["num_gpus"])]
        else:
            try:
                pairs = [tuple(int(x) for x in item.split("-")) for item in links.split(",") if item.strip()]
            except ValueError:
                raise ConfigError(f"topology.links: expected dgx1, full or a-b,c-d, got {links!r}") from None
        return build_topology(t["num_gpus"], symmetric(pairs), self.cache(), t["dram_bytes"], t["page_bytes"])

    def base_latency(self) -> LatencyModel:
        """Latency model before ``sigma_scale``; used for one-off setup work."""
        lat = self.values["latency"]
        return LatencyModel(
            *[(lat[f"{c}_mean"], lat[f"{c}_sigma"])
              for c in ("local_l2_hit", "local_dram", "remote_l2_hit", "remote_dram")],
            contention_coeff=lat["contention_coeff"],
        )

    def latency(self) -> LatencyModel:
        return self.base_latency().scaled(self.values["latency"]["sigma_scale"])

    def layout(self) -> Layout:
        s = self.values["sim"]
        return Layout(s["target_gpu"], s["spy_gpu"], s["alloc_bytes"], seed=s["seed"],
                      quantum_cycles=s["quantum_cycles"])

    def probe(self) -> ProbeConfig:
        p, c = self.values["probe"], self.cache()
        return ProbeConfig(
            stride_bytes=c.line_bytes, num_access_repeats=p["num_access_repeats"],
            kernel_repeats=p["kernel_repeats"],
            search_budget=None if p["search_budget"] < 0 else p["search_budget"],
            set_size=c.ways, votes=p["votes"], skip_block=p["skip_block"],
            page_bytes=self.values["topology"]["page_bytes"],
        )

    def alignment(self) -> AlignmentConfig:
        c = self.values["covert"]
        return AlignmentConfig(c["trojan_probe_loops"], c["spy_probe_loops"], self.cache().ways,
                               c["margin_cycles"])

    def noise_profile(self) -> NoiseProfile:
        lat = self.values["latency"]
        return NoiseProfile(lat["sigma_scale"], lat["contention_coeff"], self.values["covert"]["background_intensity"])

    def pairs(self) -> list[int]:
        return int_list(self.values["covert"]["pairs"], "covert.pairs")

    def monitor(self, noise_intensity: float | None = None) -> MonitorConfig:
        s = self.values["sidechan"]
        return MonitorConfig(s["monitored_sets"], s["num_epochs"] if s["num_epochs"] > 0 else None,
                             s["epoch_cycles"], s["noise_intensity"] if noise_intensity is None else noise_intensity,
                             s["exclusive"], s["selection"])

    def mlp_monitor(self) -> MonitorConfig:
        m, s = self.values["mlp"], self.values["sidechan"]
        return MonitorConfig(m["monitored_sets"], None, m["epoch_cycles"], s["noise_intensity"],
                             s["exclusive"], s["selection"])

    def mlp_sizes(self) -> list[int]:
        return int_list(self.values["mlp"]["sizes"], "mlp.sizes")

    def labels(self) -> list[str]:
        return [x.strip() for x in self.values["sidechan"]["labels"].split(",") if x.strip()]

    def workload(self) -> WorkloadSpec:
        w = self.values["workload"]
        return WorkloadSpec(w["kind"], parse_params(w["params"], w["kind"]), w["seed"])

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_quote(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)
