"""Dataset schema: task configurations, labels, image records, and manifests.

The manifest is a JSON file:

    {"version": 1, "schema": "irish"|"grassclover",
     "records": [{"id", "path", "domain", "altitude_m"?, "gps"?: [lat, lon],
                  "label"?: {"composition": {class: fraction, ...},
                             "herbage_mass"?, "height"?}}]}

Image paths are stored relative to the manifest file so that a dataset
directory can be relocated without rewriting the manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import DataError

COMPOSITION_TOL = 1e-6
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class TaskSchema:
    """A prediction task: which composition classes and which extra heads."""

    name: str
    composition_classes: tuple[str, ...]
    has_mass_head: bool
    has_height_head: bool


IRISH = TaskSchema(
    name="irish",
    composition_classes=("grass", "clover", "weeds"),
    has_mass_head=True,
    has_height_head=True,
)

GRASSCLOVER = TaskSchema(
    name="grassclover",
    composition_classes=("grass", "white_clover", "red_clover", "weeds"),
    has_mass_head=False,
    has_height_head=False,
)

_SCHEMAS = {s.name: s for s in (IRISH, GRASSCLOVER)}


def schema_by_name(name: str) -> TaskSchema:
    try:
        return _SCHEMAS[name]
    except KeyError:
        raise DataError(f"unknown task schema {name!r}; expected one of {sorted(_SCHEMAS)}")


@dataclass
class BiomassLabel:
    """Dry biomass composition fractions plus optional mass and height.

    ``composition`` maps class name -> fraction in [0, 1]; fractions sum to 1.
    ``herbage_mass`` is kg DM/ha, ``height`` is cm. Drone records may carry a
    mass-only label (composition None).
    """

    composition: Optional[dict[str, float]] = None
    herbage_mass: Optional[float] = None
    height: Optional[float] = None

    def validate(self, schema: TaskSchema, record_id: str = "?") -> None:
        if self.composition is not None:
            extra = set(self.composition) - set(schema.composition_classes)
            missing = set(schema.composition_classes) - set(self.composition)
            if extra or missing:
                raise DataError(
                    f"record {record_id}: composition classes do not match schema "
                    f"{schema.name} (missing={sorted(missing)}, extra={sorted(extra)})"
                )
            for cls, frac in self.composition.items():
                if not (0.0 <= frac <= 1.0):
                    raise DataError(
                        f"record {record_id}: composition fraction {cls}={frac} outside [0, 1]"
                    )
            total = sum(self.composition.values())
            if abs(total - 1.0) > COMPOSITION_TOL:
                raise DataError(
                    f"record {record_id}: composition does not sum to 1 (got {total})"
                )
        if self.herbage_mass is not None and self.herbage_mass < 0:
            raise DataError(f"record {record_id}: negative herbage_mass {self.herbage_mass}")
        if self.height is not None and self.height < 0:
            raise DataError(f"record {record_id}: negative height {self.height}")


@dataclass
class ImageRecord:
    id: str
    path: str
    domain: str  # "ground" | "drone"
    altitude_m: Optional[float] = None
    gps: Optional[tuple[float, float]] = None
    label: Optional[BiomassLabel] = None

    def validate(self, schema: TaskSchema) -> None:
        if self.domain not in ("ground", "drone"):
            raise DataError(f"record {self.id}: unknown domain {self.domain!r}")
        if self.domain == "drone":
            if self.altitude_m is None:
                raise DataError(f"record {self.id}: drone record missing altitude_m")
            if not (0.0 < self.altitude_m <= 100.0):
                raise DataError(
                    f"record {self.id}: altitude_m={self.altitude_m} outside (0, 100]"
                )
        elif self.altitude_m is not None:
            raise DataError(f"record {self.id}: ground record must not carry altitude_m")
        if self.label is not None:
            self.label.validate(schema, self.id)


@dataclass
class Manifest:
    schema: TaskSchema
    records: list[ImageRecord] = field(default_factory=list)
    # Directory image paths are relative to; set when loading, not serialized.
    root: Optional[Path] = None

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DataError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            rec.validate(self.schema)

    def image_path(self, rec: ImageRecord) -> Path:
        p = Path(rec.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def labeled(self) -> list[ImageRecord]:
        return [r for r in self.records if r.label is not None]

    def by_domain(self, domain: str) -> list[ImageRecord]:
        return [r for r in self.records if r.domain == domain]


def _label_to_json(label: BiomassLabel) -> dict:
    out: dict = {}
    if label.composition is not None:
        out["composition"] = dict(label.composition)
    if label.herbage_mass is not None:
        out["herbage_mass"] = label.herbage_mass
    if label.height is not None:
        out["height"] = label.height
    return out


def _label_from_json(obj: dict, record_id: str) -> BiomassLabel:
    if not isinstance(obj, dict):
        raise DataError(f"record {record_id}: label must be an object")
    comp = obj.get("composition")
    if comp is not None and not isinstance(comp, dict):
        raise DataError(f"record {record_id}: composition must be an object")
    return BiomassLabel(
        composition=None if comp is None else {k: float(v) for k, v in comp.items()},
        herbage_mass=None if obj.get("herbage_mass") is None else float(obj["herbage_mass"]),
        height=None if obj.get("height") is None else float(obj["height"]),
    )


def manifest_to_json(manifest: Manifest) -> dict:
    records = []
    for rec in manifest.records:
        obj: dict = {"id": rec.id, "path": rec.path, "domain": rec.domain}
        if rec.altitude_m is not None:
            obj["altitude_m"] = rec.altitude_m
        if rec.gps is not None:
            obj["gps"] = [rec.gps[0], rec.gps[1]]
        if rec.label is not None:
            obj["label"] = _label_to_json(rec.label)
        records.append(obj)
    return {"version": MANIFEST_VERSION, "schema": manifest.schema.name, "records": records}


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest_to_json(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or "records" not in obj:
        raise DataError(f"manifest {path}: missing 'records'")
    version = obj.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(f"manifest {path}: unsupported version {version!r}")
    schema = schema_by_name(obj.get("schema", ""))
    records = []
    for raw in obj["records"]:
        rid = raw.get("id", "?")
        if "path" not in raw or "domain" not in raw:
            raise DataError(f"record {rid}: missing 'path' or 'domain'")
        gps = raw.get("gps")
        records.append(
            ImageRecord(
                id=str(raw["id"]),
                path=str(raw["path"]),
                domain=str(raw["domain"]),
                altitude_m=None if raw.get("altitude_m") is None else float(raw["altitude_m"]),
                gps=None if gps is None else (float(gps[0]), float(gps[1])),
                label=None if raw.get("label") is None else _label_from_json(raw["label"], rid),
            )
        )
    manifest = Manifest(schema=schema, records=records, root=path.parent)
    manifest.validate()
    return manifest
