# Dataset generation and the binary slot container.
#
# One dataset fixes a deployment, its large-scale fading, the pilot book and
# the cluster assignment, then draws independent activity/fading/noise per
# sample. Samples are ordered train, val, test.
#
# Container layout (all little-endian), followed by a JSON sidecar at
# <path>.json carrying the generating SystemConfig and seed:
#   magic "CFAD", u32 version = 1,
#   u32 M, N, L, K, T, u64 n_train, n_val, n_test,
#   ap_positions   M x 2 float64,
#   device_positions K x 2 float64,
#   beta_db        M x K float64,
#   shadow_db      M x K float64,
#   pilots         L x K complex64 (interleaved re/im float32),
#   clusters       K x T uint32,
#   then per sample: y (M x N x L complex64, interleaved float32) and
#   K label bytes.

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import simcore
from .clustering import select_clusters
from .simcore import Deployment, LargeScaleFading, SystemConfig

MAGIC = b"CFAD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQQQ")
SAMPLE_BATCH = 512  # fixed draw granularity keeps generation deterministic


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    system: SystemConfig
    seed: int
    deployment: Deployment
    beta_db: np.ndarray       # (M, K)
    shadow_db: np.ndarray     # (M, K)
    pilots: np.ndarray        # (L, K) complex64
    clusters: np.ndarray      # (K, T)
    signals: np.ndarray       # (S, M, N, L) complex64
    labels: np.ndarray        # (S, K) uint8
    counts: tuple             # (n_train, n_val, n_test)

    @property
    def beta_lin(self) -> np.ndarray:
        return 10.0 ** (self.beta_db / 10.0)

    def fading(self) -> LargeScaleFading:
        return LargeScaleFading(
            beta_db=self.beta_db, beta_lin=self.beta_lin,
            shadow_db=self.shadow_db,
        )

    def split_indices(self, split: str) -> np.ndarray:
        n_train, n_val, n_test = self.counts
        starts = {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n_train + n_val + n_test),
        }
        if split not in starts:
            raise ValueError(f"unknown split {split!r}")
        lo, hi = starts[split]
        return np.arange(lo, hi)

    def split_tags(self) -> np.ndarray:
        tags = np.empty(self.signals.shape[0], dtype="<U5")
        for name in ("train", "val", "test"):
            tags[self.split_indices(name)] = name
        return tags


def generate_dataset(cfg: SystemConfig, counts, seed: int,
                     unit_norm_pilots: bool = False,
                     path=None) -> Dataset:
    """Draw a dataset; optionally persist it to `path` (plus JSON sidecar).

    Geometry, shadowing, pilots and each split use independent substreams
    of `seed`, so e.g. the test realizations do not depend on how many
    training samples were requested.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValueError("counts must be three nonnegative integers")
    streams = [np.random.default_rng(s)
               for s in np.random.SeedSequence(seed).spawn(6)]
    rng_geo, rng_shadow, rng_pilots = streams[:3]

    dep = simcore.place_network(cfg, rng_geo)
    fading = simcore.compute_beta(dep, cfg, rng_shadow)
    pilots = simcore.generate_pilots(
        cfg.pilot_len, cfg.num_devices, rng_pilots, unit_norm=unit_norm_pilots
    ).astype(np.complex64)
    clusters = select_clusters(fading.beta_lin, cfg.cluster_size)

    total = sum(counts)
    M, N, L, K = (cfg.num_aps, cfg.antennas_per_ap, cfg.pilot_len,
                  cfg.num_devices)
    signals = np.empty((total, M, N, L), dtype=np.complex64)
    labels = np.empty((total, K), dtype=np.uint8)
    pilots128 = pilots.astype(np.complex128)

    offset = 0
    for count, rng in zip(counts, streams[3:]):
        for start in range(0, count, SAMPLE_BATCH):
            b = min(SAMPLE_BATCH, count - start)
            act = np.stack(
                [simcore.sample_activity(cfg.activity_prob, K, rng)
                 for _ in range(b)]
            )
            y = simcore.simulate_received_batch(fading, pilots128, act, cfg, rng)
            signals[offset:offset + b] = y.astype(np.complex64)
            labels[offset:offset + b] = act
            offset += b

    ds = Dataset(
        system=cfg, seed=int(seed), deployment=dep, beta_db=fading.beta_db,
        shadow_db=fading.shadow_db, pilots=pilots, clusters=clusters,
        signals=signals, labels=labels, counts=counts,
    )
    if path is not None:
        save_dataset(ds, path)
    return ds


def save_dataset(ds: Dataset, path) -> None:
    M, N, L, K = (ds.system.num_aps, ds.system.antennas_per_ap,
                  ds.system.pilot_len, ds.system.num_devices)
    T = ds.clusters.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, M, N, L, K, T, *ds.counts))
        fh.write(np.ascontiguousarray(ds.deployment.ap_positions,
                                      dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.deployment.device_positions,
                                      dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.beta_db, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.shadow_db, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.pilots, dtype="<c8").tobytes())
        fh.write(np.ascontiguousarray(ds.clusters, dtype="<u4").tobytes())
        for i in range(ds.signals.shape[0]):
            fh.write(np.ascontiguousarray(ds.signals[i], dtype="<c8").tobytes())
            fh.write(ds.labels[i].tobytes())
    sidecar = {
        "format": "cfad-dataset",
        "version": VERSION,
        "seed": ds.seed,
        "counts": list(ds.counts),
        "system": dataclasses.asdict(ds.system),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    cfg = SystemConfig(**sidecar["system"])

    with open(path, "rb") as fh:
        blob = fh.read()

    offset = 0

    def take(nbytes, what):
        nonlocal offset
        if offset + nbytes > len(blob):
            raise DatasetFormatError(
                f"truncated dataset: need {nbytes} bytes for {what} at "
                f"offset {offset}, file has {len(blob)}"
            )
        out = blob[offset:offset + nbytes]
        offset += nbytes
        return out

    magic, version, M, N, L, K, T, n_train, n_val, n_test = _HEADER.unpack(
        take(_HEADER.size, "header")
    )
    if magic != MAGIC:
        raise DatasetFormatError("bad magic at offset 0; not a dataset file")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if (M, N, L, K) != (cfg.num_aps, cfg.antennas_per_ap, cfg.pilot_len,
                        cfg.num_devices):
        raise DatasetFormatError("header dims disagree with sidecar config")

    def array(dtype, shape, what):
        n = int(np.prod(shape))
        buf = take(np.dtype(dtype).itemsize * n, what)
        return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()

    ap_pos = array("<f8", (M, 2), "ap_positions")
    dev_pos = array("<f8", (K, 2), "device_positions")
    beta_db = array("<f8", (M, K), "beta_db")
    shadow_db = array("<f8", (M, K), "shadow_db")
    pilots = array("<c8", (L, K), "pilots")
    clusters = array("<u4", (K, T), "clusters").astype(np.int64)

    total = n_train + n_val + n_test
    signals = np.empty((total, M, N, L), dtype=np.complex64)
    labels = np.empty((total, K), dtype=np.uint8)
    for i in range(total):
        signals[i] = array("<c8", (M, N, L), f"sample {i} signal")
        labels[i] = array("u1", (K,), f"sample {i} labels")
    if offset != len(blob):
        raise DatasetFormatError(
            f"{len(blob) - offset} trailing bytes at offset {offset}"
        )

    return Dataset(
        system=cfg, seed=int(sidecar["seed"]),
        deployment=Deployment(ap_positions=ap_pos, device_positions=dev_pos),
        beta_db=beta_db, shadow_db=shadow_db, pilots=pilots,
        clusters=clusters, signals=signals, labels=labels,
        counts=(n_train, n_val, n_test),
    )
