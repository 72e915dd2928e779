"""Anchor map and the teach/repeat anchor sequence trackers.

The teach tracker re-localizes an anchor every time it re-enters
communication range (no loop closure), appending a new map entry with the
next encounter index.  The repeat tracker walks the stored map in encounter
order, binding each newly detected anchor to the next map entry.
"""

import json

import numpy as np


class IDMismatch(Exception):
    """Raised when a repeat-pass detection does not match the next map entry."""

    def __init__(self, anchor_id, expected_id, cursor):
        super().__init__(
            f"detected anchor {anchor_id} but map entry {cursor + 1} is anchor {expected_id}"
        )
        self.anchor_id = anchor_id
        self.expected_id = expected_id
        self.cursor = cursor


class AnchorMap:
    """Ordered triples (position estimate, anchor id, encounter index ell).

    Encounter indices are 1-based and consecutive; the same anchor id may
    appear multiple times with distinct indices.
    """

    def __init__(self, entries=None):
        self.entries = []  # list of (np.ndarray(3,), id, ell)
        for pos, anchor_id, ell in entries or []:
            if ell != len(self.entries) + 1:
                raise ValueError("encounter indices must be consecutive from 1")
            self.entries.append((np.asarray(pos, dtype=float), int(anchor_id), int(ell)))

    def __len__(self):
        return len(self.entries)

    def append(self, position, anchor_id):
        ell = len(self.entries) + 1
        self.entries.append((np.asarray(position, dtype=float), int(anchor_id), ell))
        return ell

    def most_recent_position(self, anchor_id):
        for pos, aid, _ell in reversed(self.entries):
            if aid == anchor_id:
                return pos
        raise KeyError(f"anchor {anchor_id} has no map entry")

    def to_json(self):
        return json.dumps(
            {
                "anchors": [
                    {"position": [float(x) for x in pos], "id": aid, "ell": ell}
                    for pos, aid, ell in self.entries
                ]
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        entries = [
            (np.array([float(x) for x in e["position"]]), e["id"], e["ell"])
            for e in data["anchors"]
        ]
        return cls(entries)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def teach_sequence_tracker(anchor_id, in_range_ids, active, anchor_map, initializer):
    """Handle one teach-pass ranging contact with `anchor_id` (must be in range).

    Active anchors return their most recent stored position.  A new anchor is
    localized via `initializer(anchor_id)`, appended to the map with the next
    encounter index, and added to the active set.  Out-of-range anchors are
    then dropped from the active set.  If the initializer raises, the map and
    active set are left unchanged.
    """
    if anchor_id not in in_range_ids:
        raise ValueError(f"anchor {anchor_id} is not within communication range")
    if anchor_id in active:
        position = anchor_map.most_recent_position(anchor_id)
    else:
        position = initializer(anchor_id)  # may raise; state untouched on failure
        anchor_map.append(position, anchor_id)
        active.add(anchor_id)
    active.intersection_update(in_range_ids)
    return position, active, anchor_map


def repeat_sequence_lookup(anchor_id, in_range_ids, active, anchor_map, cursor):
    """Handle one repeat-pass ranging contact against the stored map.

    `active` maps currently active anchor ids to their bound map index;
    `cursor` is the index (0-based) of the last consumed map entry.  A new
    detection must match the next map entry, otherwise IDMismatch is raised
    with the state unchanged.  Returns (position, active, cursor).
    """
    if anchor_id in active:
        position = anchor_map.entries[active[anchor_id]][0]
    else:
        nxt = cursor + 1
        if nxt >= len(anchor_map):
            raise IDMismatch(anchor_id, None, cursor)
        expected = anchor_map.entries[nxt][1]
        if expected != anchor_id:
            raise IDMismatch(anchor_id, expected, cursor)
        active[anchor_id] = nxt
        cursor = nxt
        position = anchor_map.entries[nxt][0]
    for aid in [a for a in active if a not in in_range_ids]:
        del active[aid]
    return position, active, cursor


def repeat_lookup_with_skip(anchor_id, in_range_ids, active, anchor_map, cursor,
                            max_skip=2):
    """Repeat lookup with the bounded-skip divergence policy.

    On an ID mismatch, look ahead up to `max_skip` further map entries for
    the detected id; if found, the skipped entries are consumed.  If not
    found the detection is ignored (position None) and the cursor is left
    alone, on the assumption that the repeat encounter order will re-align.
    """
    try:
        return repeat_sequence_lookup(anchor_id, in_range_ids, active, anchor_map, cursor)
    except IDMismatch:
        for skip in range(1, max_skip + 1):
            idx = cursor + 1 + skip
            if idx < len(anchor_map) and anchor_map.entries[idx][1] == anchor_id:
                active[anchor_id] = idx
                for aid in [a for a in active if a not in in_range_ids]:
                    del active[aid]
                return anchor_map.entries[idx][0], active, idx
        for aid in [a for a in active if a not in in_range_ids]:
            del active[aid]
        return None, active, cursor
