"""File formats and dataset assembly.

An embedding bundle stores per-image channel profiles: a human-readable text
preamble (item count, channel count and width, channel names, explicit byte
offset to the tensor region, then one id line per item) followed by the raw
little-endian float32 tensor [n x C x d], row-major. Image ids follow the
convention "<perturbation>/<batch>/<index>" so the perturbation and batch of
every instance are recoverable from the bundle alone.

Perturbation metadata is a UTF-8 TSV with exact header
id, class, cell_type, payload, batch_id, is_control and one row per
(perturbation, batch) combination; rows of one perturbation must agree on
class, cell type, and payload. Gene lists inside `payload` are joined
with ";".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .profiles import ChannelProfile, InstanceBag
from .text import CLASSES, PerturbationRecord

BUNDLE_MAGIC = "SCREENALIGN-BUNDLE v1"
METADATA_COLUMNS = ("id", "class", "cell_type", "payload", "batch_id", "is_control")
RELATION_COLUMNS = ("id_a", "id_b", "source")
ANNOTATION_COLUMNS = ("id", "genes")
_OFFSET_DIGITS = 12


@dataclass
class EmbeddingBundle:
    ids: list
    channel_names: list
    tensor: np.ndarray  # n x C x d, float32

    def __post_init__(self):
        self.tensor = np.ascontiguousarray(self.tensor, dtype=np.float32)
        if self.tensor.ndim != 3:
            raise ValueError(f"tensor must be n x C x d, got shape {self.tensor.shape}")
        n, c, _ = self.tensor.shape
        if len(self.ids) != n:
            raise ValueError(f"{len(self.ids)} ids for {n} tensor rows")
        if len(self.channel_names) != c:
            raise ValueError(f"{len(self.channel_names)} channel names for {c} channels")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("bundle ids must be unique")

    @property
    def n_items(self):
        return self.tensor.shape[0]

    @property
    def n_channels(self):
        return self.tensor.shape[1]

    @property
    def width(self):
        return self.tensor.shape[2]

    def profile(self, index):
        return ChannelProfile(image_id=self.ids[index], channels=self.tensor[index])


def write_bundle(path, bundle):
    lines = [BUNDLE_MAGIC,
             f"count={bundle.n_items}",
             f"channels={bundle.n_channels}",
             f"width={bundle.width}",
             "channel_names=" + ",".join(bundle.channel_names),
             "data_offset=" + "0" * _OFFSET_DIGITS]
    lines.extend(f"id={i}" for i in bundle.ids)
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    offset = len(header)
    header = header.replace(("data_offset=" + "0" * _OFFSET_DIGITS).encode(),
                            f"data_offset={offset:0{_OFFSET_DIGITS}d}".encode())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bundle.tensor.astype("<f4").tobytes())


def read_bundle(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    newline_at = raw.find(b"\n\n")
    if newline_at < 0:
        raise ValueError(f"{path}: missing header terminator")
    fields = {}
    ids = []
    lines = raw[:newline_at].decode("utf-8").split("\n")
    if lines[0] != BUNDLE_MAGIC:
        raise ValueError(f"{path}: bad magic line {lines[0]!r}")
    for line in lines[1:]:
        key, _, value = line.partition("=")
        if key == "id":
            ids.append(value)
        else:
            fields[key] = value
    count = int(fields["count"])
    channels = int(fields["channels"])
    width = int(fields["width"])
    offset = int(fields["data_offset"])
    names = fields["channel_names"].split(",") if fields["channel_names"] else []
    expected = 4 * count * channels * width
    actual = len(raw) - offset
    if actual != expected:
        raise ValueError(f"{path}: tensor region holds {actual} bytes, "
                         f"expected {expected}")
    tensor = np.frombuffer(raw, dtype="<f4", count=count * channels * width,
                           offset=offset).reshape(count, channels, width)
    return EmbeddingBundle(ids=ids, channel_names=names, tensor=tensor.copy())


def make_image_id(perturbation_id, batch_id, index):
    for part in (perturbation_id, batch_id):
        if "/" in part:
            raise ValueError(f"'/' not allowed in id {part!r}")
    return f"{perturbation_id}/{batch_id}/{index}"


def parse_image_id(image_id):
    parts = image_id.split("/")
    if len(parts) != 3:
        raise ValueError(f"image id {image_id!r} is not <perturbation>/<batch>/<index>")
    return parts[0], parts[1]


# ---------------------------------------------------------------------------
# TSV files

def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def _read_tsv(path, expected_header):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = tuple(lines[0].split("\t"))
    if header != tuple(expected_header):
        raise ValueError(f"{path}: header {header} != expected {tuple(expected_header)}")
    return [ln.split("\t") for ln in lines[1:] if ln]


def write_metadata(path, records):
    rows = [(r.id, r.pert_class, r.cell_type, r.payload, r.batch_id,
             "true" if r.is_control else "false") for r in records]
    _write_tsv(path, METADATA_COLUMNS, rows)


def read_metadata(path):
    records = []
    for row in _read_tsv(path, METADATA_COLUMNS):
        if len(row) != len(METADATA_COLUMNS):
            raise ValueError(f"{path}: malformed row {row!r}")
        records.append(PerturbationRecord(
            id=row[0], pert_class=row[1], cell_type=row[2], payload=row[3],
            batch_id=row[4], is_control=row[5] == "true"))
    return records


def write_relations(path, relations):
    _write_tsv(path, RELATION_COLUMNS, relations)


def read_relations(path):
    return [(a, b, source) for a, b, source in _read_tsv(path, RELATION_COLUMNS)]


def write_annotations(path, gene_map):
    rows = [(pid, ";".join(genes)) for pid, genes in sorted(gene_map.items())]
    _write_tsv(path, ANNOTATION_COLUMNS, rows)


def read_annotations(path):
    out = {}
    for pid, genes in _read_tsv(path, ANNOTATION_COLUMNS):
        out[pid] = [g for g in genes.split(";") if g]
    return out


# ---------------------------------------------------------------------------
# dataset assembly

class ScreenDataset:
    """Bundle + metadata joined into per-perturbation instance bags."""

    def __init__(self, bundle, records):
        self.bundle = bundle
        self.records = records
        self._by_pert = {}
        for rec in records:
            self._by_pert.setdefault(rec.id, []).append(rec)
        self._images = {}  # pert -> batch -> [indices]
        for idx, image_id in enumerate(bundle.ids):
            pert, batch = parse_image_id(image_id)
            self._images.setdefault(pert, {}).setdefault(batch, []).append(idx)

    @property
    def n_channels(self):
        return self.bundle.n_channels

    @property
    def width(self):
        return self.bundle.width

    def perturbation_ids(self):
        return sorted(self._by_pert)

    def non_control_ids(self):
        return [p for p in self.perturbation_ids() if not self.record_of(p).is_control]

    def control_ids(self):
        return [p for p in self.perturbation_ids() if self.record_of(p).is_control]

    def batch_ids(self):
        return sorted({rec.batch_id for rec in self.records})

    def record_of(self, pert_id):
        return self._by_pert[pert_id][0]

    def batches_of(self, pert_id):
        return sorted(self._images.get(pert_id, {}))

    def bag(self, pert_id):
        """All instances of a perturbation across batches."""
        batches = self._images.get(pert_id)
        if not batches:
            raise KeyError(f"no images for perturbation {pert_id!r}")
        profiles = [self.bundle.profile(idx)
                    for batch in sorted(batches) for idx in batches[batch]]
        return InstanceBag(pert_id, profiles)

    def bag_in_batch(self, pert_id, batch_id):
        indices = self._images.get(pert_id, {}).get(batch_id)
        if not indices:
            raise KeyError(f"no images for {pert_id!r} in batch {batch_id!r}")
        return InstanceBag(pert_id, [self.bundle.profile(i) for i in indices])


def validate_dataset(bundle, records):
    """Cross-check a bundle against its metadata; returns a problem list."""
    problems = []
    if not np.isfinite(bundle.tensor).all():
        bad = int((~np.isfinite(bundle.tensor).all(axis=(1, 2))).sum())
        problems.append(f"non-finite values in {bad} bundle item(s)")

    image_keys = set()
    for image_id in bundle.ids:
        try:
            pert, batch = parse_image_id(image_id)
            image_keys.add((pert, batch))
        except ValueError as err:
            problems.append(str(err))

    meta_keys = set()
    by_pert = {}
    for rec in records:
        meta_keys.add((rec.id, rec.batch_id))
        by_pert.setdefault(rec.id, []).append(rec)
    for pert, recs in sorted(by_pert.items()):
        first = recs[0]
        for rec in recs[1:]:
            if (rec.pert_class, rec.cell_type, rec.payload) != \
                    (first.pert_class, first.cell_type, first.payload):
                problems.append(f"inconsistent metadata rows for perturbation {pert}")
                break

    for key in sorted(meta_keys - image_keys):
        problems.append(f"metadata entry {key[0]} (batch {key[1]}) absent from bundle")
    for key in sorted(image_keys - meta_keys):
        problems.append(f"bundle item {key[0]}/{key[1]} absent from metadata")

    batches = sorted({rec.batch_id for rec in records})
    for batch in batches:
        controls = {rec.id for rec in records if rec.batch_id == batch and rec.is_control}
        if not controls:
            problems.append(f"batch {batch} has no control perturbation")
    return problems


def split_perturbations(pert_ids, seed, fractions=(0.7, 0.1, 0.2)):
    """Seeded train/val/test split by perturbation; returns id -> split name."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    from .rng import generator
    ids = sorted(pert_ids)
    order = generator(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    assignment = {}
    for i, pid in enumerate(shuffled):
        if i < n_train:
            assignment[pid] = "train"
        elif i < n_train + n_val:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    return assignment
