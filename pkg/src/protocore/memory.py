"""The three replay memories: a real-sample reservoir, per-class synthetic
exemplar slots, and per-class real-prototype anchors.

The reservoir owns its RNG (seeded at construction and serialized with
snapshots) so a resumed run continues the same stream. Batch sampling
takes an explicit per-call seed instead.
"""

import json
from dataclasses import dataclass

import numpy as np

from .seeding import child_rng
from .synthesis import SyntheticExemplar

SNAPSHOT_FORMAT = "memory-snapshot"
SNAPSHOT_VERSION = 1
FLOAT_BYTES = 8


class RealMemory:
    """Fixed-capacity uniform reservoir over a sample stream."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.items = []  # (x vector, y int) pairs
        self.seen_count = 0
        self.rng = child_rng(seed, "reservoir")

    def __len__(self):
        return len(self.items)

    def reservoir_update(self, x, y: int):
        """Classic reservoir step: item n survives with probability k/n."""
        self.seen_count += 1
        if self.capacity == 0:
            return
        if len(self.items) < self.capacity:
            self.items.append((np.asarray(x, dtype=np.float64).copy(), int(y)))
            return
        slot = int(self.rng.integers(0, self.seen_count))
        if slot < self.capacity:
            self.items[slot] = (np.asarray(x, dtype=np.float64).copy(), int(y))

    def extend(self, xs, ys):
        for x, y in zip(xs, ys):
            self.reservoir_update(x, y)

    def sample_batch(self, batch_size: int, seed: int):
        """Uniform draw without replacement; the whole memory if it is smaller."""
        if not self.items:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        n = len(self.items)
        if batch_size >= n:
            idx = np.arange(n)
        else:
            idx = child_rng(seed, "memory-batch").choice(n, size=batch_size,
                                                         replace=False)
        xs = np.stack([self.items[i][0] for i in idx])
        ys = np.array([self.items[i][1] for i in idx], dtype=np.int64)
        return xs, ys

    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.items], dtype=np.int64)


class SynthMemory:
    """Per-class slots holding at most ``per_class`` synthetic exemplars."""

    def __init__(self, per_class: int = 1):
        if per_class < 1:
            raise ValueError("per_class must be >= 1")
        self.per_class = per_class
        self.slots = {}  # class_id -> list of SyntheticExemplar

    def __len__(self):
        return sum(len(v) for v in self.slots.values())

    def classes(self):
        return sorted(self.slots)

    def exemplars_for(self, class_id: int):
        return list(self.slots.get(class_id, []))

    def replace(self, exemplars):
        """Overwrite each mentioned class with its newest exemplars."""
        grouped = {}
        for ex in exemplars:
            grouped.setdefault(ex.class_id, []).append(ex)
        for c, group in grouped.items():
            if len(group) > self.per_class:
                raise ValueError(f"class {c}: {len(group)} exemplars exceed "
                                 f"the {self.per_class}-per-class budget")
        for c, group in grouped.items():
            self.slots[c] = list(group)


class ProtoMemory:
    """Exactly one stored real prototype per seen class."""

    def __init__(self):
        self.vectors = {}  # class_id -> np.ndarray

    def __len__(self):
        return len(self.vectors)

    def classes(self):
        return sorted(self.vectors)

    def get(self, class_id: int):
        return self.vectors.get(class_id)

    def replace(self, prototypes: dict):
        for c, v in prototypes.items():
            arr = np.asarray(getattr(v, "data", v), dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"prototype for class {c} must be a vector")
            self.vectors[int(c)] = arr.copy()


@dataclass
class MemoryPool:
    """The full memory triple handed to the trainer."""

    m_x: RealMemory
    m_s: SynthMemory
    m_p: ProtoMemory

    @classmethod
    def create(cls, real_capacity: int, synth_per_class: int, seed: int):
        return cls(RealMemory(real_capacity, seed=seed),
                   SynthMemory(synth_per_class), ProtoMemory())

    def footprint(self) -> dict:
        """Stored-value counts, bytes, and effective samples-per-class."""
        real_values = sum(len(x) for x, _ in self.m_x.items)
        synth_values = sum(len(ex.decoded) for exs in self.m_s.slots.values()
                           for ex in exs)
        proto_values = sum(len(v) for v in self.m_p.vectors.values())
        real_classes = len(set(self.m_x.labels().tolist()))
        return {
            "real": {
                "items": len(self.m_x),
                "values": real_values,
                "capacity": self.m_x.capacity,
                "spc": (len(self.m_x) / real_classes) if real_classes else 0.0,
            },
            "synthetic": {
                "items": len(self.m_s),
                "values": synth_values,
                "spc": self.m_s.per_class,
            },
            "prototype": {
                "items": len(self.m_p),
                "values": proto_values,
            },
            "total_values": real_values + synth_values + proto_values,
            "total_bytes": FLOAT_BYTES * (real_values + synth_values + proto_values),
        }

    # -- snapshot ----------------------------------------------------------

    def to_snapshot(self) -> dict:
        state = self.m_x.rng.bit_generator.state
        return {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "real": {
                "capacity": self.m_x.capacity,
                "seen_count": self.m_x.seen_count,
                "items": [{"x": x.tolist(), "y": y} for x, y in self.m_x.items],
                "rng": {"bit_generator": state["bit_generator"],
                        "state": str(state["state"]["state"]),
                        "inc": str(state["state"]["inc"]),
                        "has_uint32": state["has_uint32"],
                        "uinteger": state["uinteger"]},
            },
            "synthetic": {
                "per_class": self.m_s.per_class,
                "exemplars": [{
                    "class_id": ex.class_id,
                    "latent": ex.latent.tolist(),
                    "decoded": ex.decoded.tolist(),
                    "origin_task": ex.origin_task,
                    "sigma2": ex.sigma2,
                } for c in self.m_s.classes() for ex in self.m_s.exemplars_for(c)],
            },
            "prototype": {
                "vectors": {str(c): self.m_p.vectors[c].tolist()
                            for c in self.m_p.classes()},
            },
        }

    @classmethod
    def from_snapshot(cls, payload: dict) -> "MemoryPool":
        if payload.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"not a memory snapshot: {payload.get('format')!r}")
        real = payload["real"]
        m_x = RealMemory(real["capacity"])
        m_x.seen_count = real["seen_count"]
        m_x.items = [(np.asarray(it["x"], dtype=np.float64), int(it["y"]))
                     for it in real["items"]]
        rng_state = real["rng"]
        m_x.rng.bit_generator.state = {
            "bit_generator": rng_state["bit_generator"],
            "state": {"state": int(rng_state["state"]),
                      "inc": int(rng_state["inc"])},
            "has_uint32": rng_state["has_uint32"],
            "uinteger": rng_state["uinteger"],
        }
        synth = payload["synthetic"]
        m_s = SynthMemory(synth["per_class"])
        m_s.replace([SyntheticExemplar(
            class_id=e["class_id"],
            latent=np.asarray(e["latent"], dtype=np.float64),
            decoded=np.asarray(e["decoded"], dtype=np.float64),
            origin_task=e["origin_task"],
            sigma2=e["sigma2"],
        ) for e in synth["exemplars"]])
        m_p = ProtoMemory()
        m_p.replace({int(c): np.asarray(v, dtype=np.float64)
                     for c, v in payload["prototype"]["vectors"].items()})
        return cls(m_x, m_s, m_p)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_snapshot(), fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "MemoryPool":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_snapshot(json.load(fh))
