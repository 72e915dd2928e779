"""Two-way-ranging protocol: timestamp simulation, ToF combinations, range models.

One transaction: tag 1 ranges with an anchor while tags 2 and 3 eavesdrop,
producing 8 timestamps.  Combining them yields five time-of-flight
measurements per transaction, ordered throughout as

    [tag1-anchor, tag2-anchor, tag3-anchor, tag2-tag1, tag3-tag1]

The anchor clock offset cancels exactly in all five; the remaining tag
offsets appear only where they are directly measurable.  The five ToF noises
share receive-noise terms and are therefore correlated.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.constants import speed_of_light as C_LIGHT

from .lie import skew


@dataclass
class TagGeometry:
    """Known body-frame tag positions relative to the IMU (rows = tags 1..3)."""

    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.offsets.shape != (3, 3):
            raise ValueError("expected 3 tags x 3 coordinates")

    @property
    def inter_tag_tof(self):
        """Known tag1->tag2 and tag1->tag3 times of flight, seconds."""
        d21 = np.linalg.norm(self.offsets[1] - self.offsets[0])
        d31 = np.linalg.norm(self.offsets[2] - self.offsets[0])
        return np.array([d21, d31]) / C_LIGHT


@dataclass
class TwrTransaction:
    """The 8 timestamps of one ranging exchange (all seconds).

    rho{j}_{1,2} are tag-j receive stamps for the request/response signals;
    alpha_r1/alpha_t2 are the anchor's receive and reply-transmit stamps.
    """

    anchor_id: int
    k: int
    rho1_t1: float
    alpha_r1: float
    alpha_t2: float
    rho1_r2: float
    rho2_r1: float
    rho2_r2: float
    rho3_r1: float
    rho3_r2: float

    def check_reply_delay(self, delay, tol=0.0):
        if abs((self.alpha_t2 - self.alpha_r1) - delay) > tol:
            raise ValueError("anchor reply stamp must equal receive stamp + delay")


@dataclass
class RangeMeasurementSet:
    """Five ToF measurements from one transaction (seconds)."""

    anchor_id: int
    tag1_anchor: float
    tag2_anchor: float
    tag3_anchor: float
    tag2_tag1: float
    tag3_tag1: float

    @property
    def vec(self):
        return np.array(
            [
                self.tag1_anchor,
                self.tag2_anchor,
                self.tag3_anchor,
                self.tag2_tag1,
                self.tag3_tag1,
            ]
        )

    @classmethod
    def from_vec(cls, anchor_id, y):
        return cls(anchor_id, *(float(x) for x in y))


def simulate_transaction(truth, anchor_id, anchor_pos, spec, rng, k=0, t_k=0.0):
    """Simulate the 8 timestamps of one exchange at the current true state.

    Receive stamps carry Gaussian noise of std spec.sigma_t; transmit stamps
    are noiseless.  The anchor reply stamp is exactly receive + reply delay.
    """
    C, r = truth.pose.C, truth.pose.r
    tags = truth.tag_offsets
    d = np.linalg.norm(r - np.asarray(anchor_pos) + (C @ tags.T).T, axis=1)
    tof = d / C_LIGHT
    d21 = np.linalg.norm(tags[1] - tags[0]) / C_LIGHT
    d31 = np.linalg.norm(tags[2] - tags[0]) / C_LIGHT
    tau_a = truth.clock.anchor_offsets.get(anchor_id, 0.0)
    tau2, tau3 = truth.clock.tag_offsets
    nu = rng.standard_normal(6) * spec.sigma_t
    dt_reply = spec.anchor_reply_delay

    alpha_r1 = t_k + tof[0] - tau_a + nu[0]
    alpha_t2 = alpha_r1 + dt_reply
    return TwrTransaction(
        anchor_id=anchor_id,
        k=k,
        rho1_t1=t_k,
        alpha_r1=alpha_r1,
        alpha_t2=alpha_t2,
        rho1_r2=alpha_t2 + tof[0] + tau_a + nu[1],
        rho2_r1=t_k + d21 + tau2 + nu[2],
        rho2_r2=alpha_t2 + tof[1] + tau2 + tau_a + nu[3],
        rho3_r1=t_k + d31 + tau3 + nu[4],
        rho3_r2=alpha_t2 + tof[2] + tau3 + tau_a + nu[5],
    )


def compute_tof(txn):
    """Form the five ToF combinations; anchor clock offsets cancel exactly."""
    y1 = 0.5 * ((txn.alpha_r1 - txn.rho1_t1) + (txn.rho1_r2 - txn.alpha_t2))
    y21 = txn.rho2_r1 - txn.rho1_t1
    y31 = txn.rho3_r1 - txn.rho1_t1
    y2 = txn.rho2_r2 - txn.alpha_t2 + txn.alpha_r1 - txn.rho1_t1 - y1
    y3 = txn.rho3_r2 - txn.alpha_t2 + txn.alpha_r1 - txn.rho1_t1 - y1
    return RangeMeasurementSet(txn.anchor_id, y1, y2, y3, y21, y31)


def predict_ranges(C, r, tag_clock_offsets, anchor_pos, tags, with_jacobians=False):
    """Noise-free modelled ToF means for a pose (C, r) and clock offsets.

    Optionally returns analytic Jacobians w.r.t. position, attitude
    (right perturbation), the two tag clock offsets, and the anchor position.
    """
    anchor_pos = np.asarray(anchor_pos, dtype=float)
    t = tags.offsets
    u = r - anchor_pos + (C @ t.T).T  # (3, 3): rows = tags
    d = np.linalg.norm(u, axis=1)
    tau2, tau3 = tag_clock_offsets
    tof_tags = tags.inter_tag_tof
    y = np.array(
        [
            d[0] / C_LIGHT,
            d[1] / C_LIGHT + tau2,
            d[2] / C_LIGHT + tau3,
            tof_tags[0] + tau2,
            tof_tags[1] + tau3,
        ]
    )
    if not with_jacobians:
        return y

    e = u / d[:, None]
    d_pos = np.zeros((5, 3))
    d_att = np.zeros((5, 3))
    d_anchor = np.zeros((5, 3))
    for row in range(3):
        d_pos[row] = e[row] / C_LIGHT
        d_att[row] = -(e[row] @ C @ skew(t[row])) / C_LIGHT
        d_anchor[row] = -e[row] / C_LIGHT
    d_clock = np.zeros((5, 2))
    d_clock[1, 0] = 1.0
    d_clock[2, 1] = 1.0
    d_clock[3, 0] = 1.0
    d_clock[4, 1] = 1.0
    return y, {"pos": d_pos, "att": d_att, "clock": d_clock, "anchor": d_anchor}


def range_noise_covariance(sigma_t):
    """Exact 5x5 covariance of the correlated ToF noises (seconds^2).

    With i.i.d. receive noise of variance s2 on each of the six receive
    stamps:  var(tag1-anchor) = s2/2, var(tagj-anchor) = 3 s2/2 with
    cross-covariance s2/2 between tags 2 and 3, var(tagj-tag1) = s2, and the
    tag1-anchor noise is uncorrelated with the tagj-anchor ones.
    """
    if sigma_t < 0.0:
        raise ValueError("sigma_t must be nonnegative")
    s2 = sigma_t**2
    R = np.diag([0.5, 1.5, 1.5, 1.0, 1.0]) * s2
    R[1, 2] = R[2, 1] = 0.5 * s2
    return R


def write_transactions_csv(path, transactions):
    """One row per transaction, 8 timestamp columns, for offline replay."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "k", "anchor_id",
                "rho1_t1", "alpha_r1", "alpha_t2", "rho1_r2",
                "rho2_r1", "rho2_r2", "rho3_r1", "rho3_r2",
            ]
        )
        for txn in transactions:
            w.writerow(
                [txn.k, txn.anchor_id]
                + [
                    repr(float(x))
                    for x in (
                        txn.rho1_t1, txn.alpha_r1, txn.alpha_t2, txn.rho1_r2,
                        txn.rho2_r1, txn.rho2_r2, txn.rho3_r1, txn.rho3_r2,
                    )
                ]
            )


def read_transactions_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                TwrTransaction(
                    anchor_id=int(row["anchor_id"]),
                    k=int(row["k"]),
                    **{f: float(row[f]) for f in (
                        "rho1_t1", "alpha_r1", "alpha_t2", "rho1_r2",
                        "rho2_r1", "rho2_r2", "rho3_r1", "rho3_r2",
                    )},
                )
            )
    return out
