"""Simulation knobs with Table-1-style defaults, loadable from TOML.

Every value named here can be overridden by a config file; unknown keys
are rejected so typos fail loudly at load time (exit code 2 from the
CLI).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .caches import CacheLevelConfig
from .device import DeviceTiming
from .translate import TlbGeometry

MB = 1024 * 1024


class ConfigError(Exception):
    pass


@dataclass
class Config:
    # core model: fixed 0.25 cycles per non-memory instruction (4-wide proxy)
    mlp_limit: int = 8
    warmup_instructions: int = 0
    drain_at_end: bool = True

    # cache hierarchy
    l1_kb: int = 32
    l1_ways: int = 8
    l1_latency: int = 4
    l2_kb: int = 256
    l2_ways: int = 8
    l2_latency: int = 8
    l3_kb: int = 8192
    l3_ways: int = 16
    l3_latency: int = 31

    # TLBs and walk caches
    tlb_l1_4k: int = 64
    tlb_l1_2m: int = 32
    tlb_l2: int = 512
    tlb_l2_ways: int = 4
    tlb_vb_direct: int = 32
    pwc_entries: int = 32
    vit_cache_entries: int = 64

    # translation and OS charges (cycles)
    walk_access_cycles: int = 20
    fault_cycles: int = 2000
    swap_in_cycles: int = 10000
    cvt_miss_cycles: int = 8  # one L2-latency charge
    mtl_overlap_l3: bool = True

    # physical memory
    pool_mb: int = 2048

    # devices
    dram_trcd: int = 5
    dram_trp: int = 5
    dram_trrd_act: int = 3
    dram_trrd_pre: int = 3
    pcm_trcd: int = 22
    pcm_trp: int = 60
    pcm_trrd_act: int = 2
    pcm_trrd_pre: int = 11
    tl_fast_trcd: int = 3
    tl_fast_trp: int = 3
    col_cycles: int = 4
    banks: int = 8

    # heterogeneous layouts and migration
    pcm_dram_fast_fraction: float = 0.25
    tldram_fast_fraction: float = 0.125
    epoch_cycles: int = 10_000_000

    # block-interface specifics
    vm_mode: bool = False
    vm_id: int = 0
    scrub_lines_per_cycle: int = 64

    # timing model detail
    audit_device: bool = False

    def cache_configs(self) -> list[CacheLevelConfig]:
        return [
            CacheLevelConfig(self.l1_kb * 1024, self.l1_ways, self.l1_latency),
            CacheLevelConfig(self.l2_kb * 1024, self.l2_ways, self.l2_latency),
            CacheLevelConfig(self.l3_kb * 1024, self.l3_ways, self.l3_latency),
        ]

    def tlb_geometry(self) -> TlbGeometry:
        return TlbGeometry(
            l1_4k_entries=self.tlb_l1_4k,
            l1_2m_entries=self.tlb_l1_2m,
            l2_entries=self.tlb_l2,
            l2_ways=self.tlb_l2_ways,
            vb_direct_entries=self.tlb_vb_direct,
            pwc_entries=self.pwc_entries,
        )

    def pool_frames(self) -> int:
        return self.pool_mb * MB // 4096

    def dram_timing(self, scale: int = 1) -> DeviceTiming:
        return DeviceTiming(self.dram_trcd * scale, self.dram_trp * scale,
                            self.dram_trrd_act * scale, self.dram_trrd_pre * scale,
                            self.col_cycles * scale, self.banks)

    def pcm_timing(self, scale: int = 1) -> DeviceTiming:
        return DeviceTiming(self.pcm_trcd * scale, self.pcm_trp * scale,
                            self.pcm_trrd_act * scale, self.pcm_trrd_pre * scale,
                            self.col_cycles * scale, self.banks)

    def tl_fast_timing(self, scale: int = 1) -> DeviceTiming:
        return DeviceTiming(self.tl_fast_trcd * scale, self.tl_fast_trp * scale,
                            self.dram_trrd_act * scale, self.dram_trrd_pre * scale,
                            self.col_cycles * scale, self.banks)


_FIELDS = {f.name: f.type for f in fields(Config)}


def load_config(path: str | None) -> Config:
    cfg = Config()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot load config {path}: {e}") from e
    apply_overrides(cfg, doc, source=path)
    return cfg


def apply_overrides(cfg: Config, doc: dict, source: str = "<dict>") -> None:
    """Apply a flat or one-level-nested mapping onto the config."""
    flat: dict[str, object] = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}_{sub}" if f"{key}_{sub}" in _FIELDS else sub] = v
        else:
            flat[key] = value
    for key, value in flat.items():
        if key not in _FIELDS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{source}: key {key!r} expects a boolean")
        if isinstance(current, int) and isinstance(value, bool):
            raise ConfigError(f"{source}: key {key!r} expects a number")
        setattr(cfg, key, type(current)(value))
    if cfg.vm_mode and not 0 <= cfg.vm_id < 32:
        raise ConfigError(f"{source}: vm_id {cfg.vm_id} out of range 0..31")
