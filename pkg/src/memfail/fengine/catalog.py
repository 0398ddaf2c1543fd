"""The fixed, ordered feature catalog.

Scopes:

* ``W``        -- the observation window ``(t0 - w, t0]``
* ``H``        -- the history before the window, ``(-inf, t0 - w]``
* ``lifetime`` -- everything up to ``t0`` (union of W and H)
* ``delta``    -- contrasts between W and H

Rates are CEs per hour. The window rate uses the nominal window length ``w``;
the history rate spans from the first CE in H to the window boundary ``t0 - w``.
A rate over zero span or zero events is 0. Relative changes divide by
``max(value_H, 1e-9)``.
"""

from __future__ import annotations

from dataclasses import dataclass

CATALOG_VERSION = "memfail-catalog/1"
EPSILON = 1e-9

SCOPES = ("W", "H", "lifetime", "delta")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    taxonomy: str
    scope: str
    integer: bool
    description: str


def _address_group(group: str, unit: str, adj_name: str, adj_desc: str) -> list[FeatureSpec]:
    # row/column/cell share one layout; only key shape and neighbour metric differ
    rep = f"{group}/repeating"
    nbr = f"{group}/neighbourhood"
    agn = f"{group}/bank_agnostic"
    plural = f"{unit}s"
    return [
        FeatureSpec(f"{group}.{plural}_with_ce_W", rep, "W", True, f"distinct {unit} addresses with a CE in W"),
        FeatureSpec(f"{group}.{plural}_with_repeat_W", rep, "W", True, f"{unit} addresses with >= r_min CEs in W"),
        FeatureSpec(f"{group}.{plural}_with_repeat_lifetime", rep, "lifetime", True, f"{unit} addresses with >= r_min CEs ever"),
        FeatureSpec(f"{group}.max_ce_per_{unit}_W", rep, "W", True, f"largest CE count on one {unit} address in W"),
        FeatureSpec(f"{group}.new_{plural}_W", rep, "delta", True, f"{unit} addresses in W never seen in H"),
        FeatureSpec(f"{group}.{adj_name}", nbr, "W", True, adj_desc),
        FeatureSpec(f"{group}.{plural}_with_neighbour_lifetime", nbr, "lifetime", True,
                    f"{unit} addresses with another CE {unit} within the neighbourhood radius, ever"),
        FeatureSpec(f"{group}.{unit}_multibank_W", agn, "W", True, f"{unit} indices with CEs in >= 2 banks in W"),
        FeatureSpec(f"{group}.{unit}_multibank_lifetime", agn, "lifetime", True, f"{unit} indices with CEs in >= 2 banks ever"),
    ]


_CATALOG: tuple[FeatureSpec, ...] = tuple(
    [
        FeatureSpec("general.ce_count_W", "general", "W", True, "CEs in W"),
        FeatureSpec("general.ce_count_H", "general", "H", True, "CEs in H"),
        FeatureSpec("general.ce_rate_W", "general", "W", False, "CEs per hour in W"),
        FeatureSpec("general.ce_rate_H", "general", "H", False, "CEs per hour in H"),
        FeatureSpec("general.rel_change_ce_rate", "general", "delta", False, "relative change of the CE rate, H to W"),
        FeatureSpec("general.ce_read_count_W", "general/error_type", "W", True, "ce.read CEs in W"),
        FeatureSpec("general.ce_scrub_count_W", "general/error_type", "W", True, "ce.scrub CEs in W"),
        FeatureSpec("general.ce_read_count_H", "general/error_type", "H", True, "ce.read CEs in H"),
        FeatureSpec("general.ce_scrub_count_H", "general/error_type", "H", True, "ce.scrub CEs in H"),
        FeatureSpec("general.rel_change_ce_read", "general/error_type", "delta", False, "relative change of the ce.read rate, H to W"),
        FeatureSpec("general.rel_change_ce_scrub", "general/error_type", "delta", False, "relative change of the ce.scrub rate, H to W"),
        FeatureSpec("general.time_since_first_ce", "general", "lifetime", False, "hours since the first CE"),
        FeatureSpec("general.time_since_prev_ce", "general", "lifetime", False, "hours between the latest CE and the one before it"),
        FeatureSpec("bank.distinct_banks_W", "bank", "W", True, "banks with a CE in W"),
        FeatureSpec("bank.distinct_banks_H", "bank", "H", True, "banks with a CE in H"),
        FeatureSpec("bank.distinct_banks_lifetime", "bank", "lifetime", True, "banks with a CE ever"),
        FeatureSpec("bank.new_banks_W", "bank", "delta", True, "banks in W never seen in H"),
        FeatureSpec("bank.max_ce_per_bank_W", "bank", "W", True, "largest CE count on one bank in W"),
        FeatureSpec("bank.mean_ce_per_bank_W", "bank", "W", False, "CEs per reporting bank in W"),
    ]
    + _address_group("row", "row", "adjacent_row_pairs_W",
                     "pairs of CE rows in W in the same bank with |row difference| <= radius")
    + _address_group("column", "column", "adjacent_column_pairs_W",
                     "pairs of CE columns in W in the same bank with |column difference| <= radius")
    + _address_group("cell", "cell", "adjacent_cells_W",
                     "pairs of CE cells in W in the same bank within Chebyshev distance <= radius")
)

N_FEATURES = len(_CATALOG)
FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in _CATALOG)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}
WINDOW_MASK: tuple[bool, ...] = tuple(f.scope == "W" for f in _CATALOG)
INTEGER_MASK: tuple[bool, ...] = tuple(f.integer for f in _CATALOG)


def catalog() -> tuple[FeatureSpec, ...]:
    return _CATALOG


def render_catalog() -> str:
    """Markdown reference document for the catalog."""
    lines = [
        f"# Feature catalog `{CATALOG_VERSION}`",
        "",
        f"{N_FEATURES} features, in feature-vector order.",
        "",
        "| # | name | taxonomy | scope | kind | description |",
        "|---|------|----------|-------|------|-------------|",
    ]
    for i, f in enumerate(_CATALOG):
        kind = "int" if f.integer else "real"
        lines.append(f"| {i} | `{f.name}` | {f.taxonomy} | {f.scope} | {kind} | {f.description} |")
    lines.append("")
    return "\n".join(lines)
