"""HFC plant topology: hubs, fiber-nodes, amplifier trees, modem attachment.

The plant is a forest: each hub serves fiber-nodes, each fiber-node roots a
tree of amplifiers, and modems hang off amplifiers. Amplifiers that carry at
least one modem are "last-line" amplifiers; they are the only devices a
root-cause label can point at, because field records never resolve deeper.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

_DASH_RUN = re.compile(r"-+")

TOP_LEVEL_KEYS = {"hubs", "fiber_nodes", "amplifiers", "modems"}
FIBER_NODE_KEYS = {"id", "hub"}
AMPLIFIER_KEYS = {"id", "parent", "fiber_node", "aliases", "lat", "lon"}
MODEM_KEYS = {"mac", "amplifier"}


class TopologyError(Exception):
    """Base class for topology problems."""


class TopologyFormatError(TopologyError):
    """File cannot be parsed, or a record has missing/unknown keys."""


class TopologyValidationError(TopologyError):
    """Parseable topology that violates structural invariants.

    Carries every violation found, not just the first.
    """

    def __init__(self, violations):
        self.violations = tuple(violations)
        msg = "invalid topology (%d problem%s): %s" % (
            len(self.violations),
            "" if len(self.violations) == 1 else "s",
            "; ".join(self.violations),
        )
        super().__init__(msg)


def normalize_alias(text):
    """Canonical form of a device alias: uppercase, punctuation runs to a dash.

    "amp_05_03" and "AMP 05-03" both map to "AMP-05-03". Numeric padding is
    preserved, so a padded and an unpadded spelling are distinct aliases and
    must both be listed if both occur in the field.
    """
    out = "".join(ch if ch.isalnum() else "-" for ch in text.upper())
    return _DASH_RUN.sub("-", out).strip("-")


@dataclass(frozen=True)
class Amplifier:
    parent: str  # parent amplifier id, or the fiber-node id for tree roots
    fiber_node: str
    aliases: tuple[str, ...]
    lat: float | None = None
    lon: float | None = None


@dataclass(frozen=True)
class NetworkTopology:
    """Validated, immutable view of one plant.

    Lookup maps are precomputed at load time; treat all fields as read-only.
    """

    hubs: tuple[str, ...]
    fiber_nodes: dict[str, str]  # fiber-node id -> hub id
    amplifiers: dict[str, Amplifier]
    modems: dict[str, str]  # modem MAC -> amplifier id
    modems_by_amplifier: dict[str, tuple[str, ...]] = field(repr=False)
    alias_map: dict[str, str] = field(repr=False)  # normalized alias -> amp id
    _last_line: dict[str, tuple[str, ...]] = field(repr=False)

    def hub_of_fiber_node(self, fiber_node):
        return self.fiber_nodes[fiber_node]

    def hub_of_amplifier(self, amplifier):
        return self.fiber_nodes[self.amplifiers[amplifier].fiber_node]

    def path_to_fiber_node(self, amplifier):
        """Parent chain from an amplifier up to (and including) its fiber-node."""
        if amplifier not in self.amplifiers:
            raise KeyError(f"unknown amplifier {amplifier!r}")
        path = [amplifier]
        cur = amplifier
        while cur in self.amplifiers:
            cur = self.amplifiers[cur].parent
            path.append(cur)
        return tuple(path)

    def last_line_amplifiers(self, fiber_node):
        """Modem-bearing amplifiers under a fiber-node, sorted by id."""
        if fiber_node not in self.fiber_nodes:
            raise KeyError(f"unknown fiber-node {fiber_node!r}")
        return self._last_line.get(fiber_node, ())

    def fiber_node_of(self, device):
        """Fiber-node owning a device id (fiber-node, amplifier, or modem MAC)."""
        if device in self.fiber_nodes:
            return device
        if device in self.amplifiers:
            return self.amplifiers[device].fiber_node
        if device in self.modems:
            return self.amplifiers[self.modems[device]].fiber_node
        raise KeyError(f"unknown device {device!r}")


def _require_keys(record, allowed, required, what, errors):
    keys = set(record)
    unknown = keys - allowed
    missing = required - keys
    if unknown:
        errors.append(f"{what}: unknown key(s) {sorted(unknown)}")
    if missing:
        errors.append(f"{what}: missing key(s) {sorted(missing)}")
    return not unknown and not missing


def build_topology(data):
    """Validate a parsed topology document and build the lookup structure.

    Raises TopologyFormatError for shape problems and TopologyValidationError
    (with the full violation list) for structural ones.
    """
    if not isinstance(data, dict):
        raise TopologyFormatError("topology document must be a JSON object")
    unknown = set(data) - TOP_LEVEL_KEYS
    if unknown:
        raise TopologyFormatError(f"unknown top-level key(s) {sorted(unknown)}")
    missing = TOP_LEVEL_KEYS - set(data)
    if missing:
        raise TopologyFormatError(f"missing top-level key(s) {sorted(missing)}")

    fmt_errors = []
    hubs = []
    for i, hub in enumerate(data["hubs"]):
        if not isinstance(hub, str) or not hub:
            fmt_errors.append(f"hubs[{i}]: must be a non-empty string")
        else:
            hubs.append(hub)

    fiber_nodes = {}
    for i, rec in enumerate(data["fiber_nodes"]):
        what = f"fiber_nodes[{i}]"
        if not isinstance(rec, dict):
            fmt_errors.append(f"{what}: must be an object")
            continue
        if not _require_keys(rec, FIBER_NODE_KEYS, FIBER_NODE_KEYS, what, fmt_errors):
            continue
        fiber_nodes[rec["id"]] = rec["hub"]

    amp_records = {}
    for i, rec in enumerate(data["amplifiers"]):
        what = f"amplifiers[{i}]"
        if not isinstance(rec, dict):
            fmt_errors.append(f"{what}: must be an object")
            continue
        if not _require_keys(rec, AMPLIFIER_KEYS, {"id", "parent", "fiber_node", "aliases"}, what, fmt_errors):
            continue
        amp_records[rec["id"]] = Amplifier(
            parent=rec["parent"],
            fiber_node=rec["fiber_node"],
            aliases=tuple(rec["aliases"]),
            lat=rec.get("lat"),
            lon=rec.get("lon"),
        )

    modem_records = []
    for i, rec in enumerate(data["modems"]):
        what = f"modems[{i}]"
        if not isinstance(rec, dict):
            fmt_errors.append(f"{what}: must be an object")
            continue
        if not _require_keys(rec, MODEM_KEYS, MODEM_KEYS, what, fmt_errors):
            continue
        modem_records.append((rec["mac"], rec["amplifier"]))

    if fmt_errors:
        raise TopologyFormatError("; ".join(fmt_errors))

    errors = []
    if len(set(hubs)) != len(hubs):
        errors.append("duplicate hub ids")
    if len(fiber_nodes) != len(data["fiber_nodes"]):
        errors.append("duplicate fiber-node ids")
    if len(amp_records) != len(data["amplifiers"]):
        errors.append("duplicate amplifier ids")

    hub_set = set(hubs)
    for fn, hub in fiber_nodes.items():
        if hub not in hub_set:
            errors.append(f"fiber-node {fn}: unknown hub {hub!r}")

    # Walk every amplifier's parent chain: it must terminate at the declared
    # fiber-node without revisiting a node (cycles) or leaving the plant.
    for amp_id, amp in amp_records.items():
        if amp.fiber_node not in fiber_nodes:
            errors.append(f"amplifier {amp_id}: unknown fiber-node {amp.fiber_node!r}")
            continue
        seen = {amp_id}
        cur = amp.parent
        while True:
            if cur in fiber_nodes:
                if cur != amp.fiber_node:
                    errors.append(
                        f"amplifier {amp_id}: parent chain reaches {cur}, declared fiber-node is {amp.fiber_node}"
                    )
                break
            if cur not in amp_records:
                errors.append(f"amplifier {amp_id}: parent chain hits unknown device {cur!r}")
                break
            if cur in seen:
                errors.append(f"amplifier {amp_id}: parent chain contains a cycle at {cur}")
                break
            seen.add(cur)
            cur = amp_records[cur].parent

    modems = {}
    for mac, amp_id in modem_records:
        if not mac:
            errors.append("modem with empty MAC")
            continue
        if mac in modems:
            errors.append(f"duplicate modem MAC {mac}")
            continue
        if amp_id not in amp_records:
            errors.append(f"modem {mac}: unknown amplifier {amp_id!r}")
            continue
        modems[mac] = amp_id

    alias_map = {}
    for amp_id in sorted(amp_records):
        for alias in amp_records[amp_id].aliases:
            norm = normalize_alias(alias)
            if not norm:
                errors.append(f"amplifier {amp_id}: alias {alias!r} normalizes to nothing")
                continue
            owner = alias_map.get(norm)
            if owner is not None and owner != amp_id:
                errors.append(
                    f"alias collision: {alias!r} on {amp_id} normalizes to {norm!r} already used by {owner}"
                )
            else:
                alias_map[norm] = amp_id

    if errors:
        raise TopologyValidationError(errors)

    modems_by_amp = {}
    for mac in sorted(modems):
        modems_by_amp.setdefault(modems[mac], []).append(mac)
    last_line = {}
    for amp_id in sorted(amp_records):
        if amp_id in modems_by_amp:
            last_line.setdefault(amp_records[amp_id].fiber_node, []).append(amp_id)

    return NetworkTopology(
        hubs=tuple(hubs),
        fiber_nodes=fiber_nodes,
        amplifiers=amp_records,
        modems=modems,
        modems_by_amplifier={a: tuple(m) for a, m in modems_by_amp.items()},
        alias_map=alias_map,
        _last_line={fn: tuple(a) for fn, a in last_line.items()},
    )


def load_topology(path):
    """Parse and validate a topology JSON file."""
    try:
        with open(path, "rb") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TopologyFormatError(f"{path}: not valid JSON: {exc}") from exc
    return build_topology(data)


def topology_to_dict(topo):
    return {
        "hubs": list(topo.hubs),
        "fiber_nodes": [
            {"id": fn, "hub": topo.fiber_nodes[fn]} for fn in sorted(topo.fiber_nodes)
        ],
        "amplifiers": [
            {
                "id": amp_id,
                "parent": amp.parent,
                "fiber_node": amp.fiber_node,
                "aliases": list(amp.aliases),
                **({"lat": amp.lat} if amp.lat is not None else {}),
                **({"lon": amp.lon} if amp.lon is not None else {}),
            }
            for amp_id, amp in sorted(topo.amplifiers.items())
        ],
        "modems": [
            {"mac": mac, "amplifier": topo.modems[mac]} for mac in sorted(topo.modems)
        ],
    }


def save_topology(topo, path):
    """Write a topology back out; load(save(t)) reproduces t exactly."""
    doc = topology_to_dict(topo)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
