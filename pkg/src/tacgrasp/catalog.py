"""Object catalog: named ObjectSpec presets loadable from a TSV file.

The packaged catalog ships twelve desk objects.  Seven of them form the
standard evaluation set; the other five only ever appear in training data.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ParseError
from .sim import ObjectSpec

CATALOG_COLUMNS = ("name", "mass_g", "width_mm", "stiffness_n_per_mm", "mu", "max_fill_g")

# Objects the eval and bench commands run on, in reporting order.
TEST_OBJECTS = (
    "pill_box",
    "tea_can",
    "mouthwash",
    "milk_bottle",
    "wine_bottle",
    "perfume",
    "ink",
)


def parse_catalog(text: str) -> dict[str, ObjectSpec]:
    """Parse catalog TSV text into an ordered name -> ObjectSpec mapping."""
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty catalog", line=1)
    header = tuple(lines[0].rstrip("\n").split("\t"))
    if header != CATALOG_COLUMNS:
        raise ParseError(
            f"catalog header must be {list(CATALOG_COLUMNS)}, got {list(header)}", line=1
        )
    objects: dict[str, ObjectSpec] = {}
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(CATALOG_COLUMNS):
            raise ParseError(
                f"expected {len(CATALOG_COLUMNS)} fields, got {len(fields)}", line=i
            )
        name = fields[0]
        if name in objects:
            raise ParseError(f"duplicate object name {name!r}", line=i)
        try:
            spec = ObjectSpec(
                name=name,
                mass_g=float(fields[1]),
                width_mm=float(fields[2]),
                stiffness_n_per_mm=float(fields[3]),
                mu=float(fields[4]),
                max_fill_g=float(fields[5]),
            )
        except ValueError as exc:
            raise ParseError(f"bad numeric field: {exc}", line=i) from exc
        objects[name] = spec
    return objects


def load_catalog(path: str | Path | None = None) -> dict[str, ObjectSpec]:
    """Load a catalog file; None loads the packaged twelve-object preset."""
    if path is None:
        text = resources.files(__package__).joinpath("objects.tsv").read_text()
    else:
        text = Path(path).read_text()
    return parse_catalog(text)
