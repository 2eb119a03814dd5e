"""Two-stage majority-vote labeling over image pairs.

Every image pair is judged in two stages. A fixed-size panel first votes on
whether the unperturbed image shows its intended label; failing a strict
majority of choice 1 discards the pair. The judges who voted choice 1 then
vote on the perturbed image: a strict majority of choice 1 marks the
perturbation a success, anything else (including a tie) marks it as having
changed the class.

Votes append to a JSONL log, which is the source of truth; replaying the log
reconstructs identical state.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Mapping

STAGE_UNPERTURBED = "unperturbed"
STAGE_PERTURBED = "perturbed"
STAGES = (STAGE_UNPERTURBED, STAGE_PERTURBED)

CHOICE_MATCHES = 1  # "this is an image of the label"
CHOICES = (1, 2, 3, 4)  # matches / something else / unclear / not meaningful

OUTCOME_UNPERT_REJECTED = "unpert_rejected"
OUTCOME_SUCCESS = "success"
OUTCOME_CLASS_CHANGED = "class_changed"

DEFAULT_PANEL_SIZE = 5
RESERVATION_TTL = 300.0


class VoteError(ValueError):
    """A vote or task request violated the protocol."""


@dataclass(frozen=True)
class VoteRecord:
    judge_id: str
    image_id: int
    stage: str
    choice: int
    timestamp: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "VoteRecord":
        return cls(
            judge_id=str(obj["judge_id"]),
            image_id=int(obj["image_id"]),
            stage=obj["stage"],
            choice=int(obj["choice"]),
            timestamp=float(obj.get("timestamp", 0.0)),
        )


@dataclass(frozen=True)
class Disposition:
    image_id: int
    outcome: str
    unperturbed_tally: dict
    perturbed_tally: dict

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "outcome": self.outcome,
            "unperturbed_tally": self.unperturbed_tally,
            "perturbed_tally": self.perturbed_tally,
        }


@dataclass(frozen=True)
class ImageEntry:
    image_id: int
    label_name: str


def decide_outcome(
    stage1_choices: Iterable[int],
    stage2_choices: Iterable[int] | None,
    panel_size: int = DEFAULT_PANEL_SIZE,
) -> str:
    """Pure disposition rule over complete vote sets.

    ``stage2_choices`` holds one vote per stage-1 choice-1 judge; it may be
    None only when stage 1 already rejected the image.
    """
    stage1 = list(stage1_choices)
    if len(stage1) != panel_size:
        raise VoteError(f"stage 1 needs {panel_size} votes, got {len(stage1)}")
    keep = sum(1 for c in stage1 if c == CHOICE_MATCHES)
    if keep < panel_size // 2 + 1:
        return OUTCOME_UNPERT_REJECTED
    stage2 = list(stage2_choices or ())
    if len(stage2) != keep:
        raise VoteError(f"stage 2 needs {keep} votes, got {len(stage2)}")
    still = sum(1 for c in stage2 if c == CHOICE_MATCHES)
    # Strict majority; a tie means the class change is too plausible to count.
    if still * 2 > keep:
        return OUTCOME_SUCCESS
    return OUTCOME_CLASS_CHANGED


class LabelingSession:
    """Task assignment, vote storage, and aggregation for one image set."""

    def __init__(
        self,
        images: Iterable[ImageEntry],
        panel_size: int = DEFAULT_PANEL_SIZE,
        judges: Iterable[str] | None = None,
        log_path: str | Path | None = None,
        order_seed: int = 0,
        clock=time.time,
    ):
        self.images = {img.image_id: img for img in images}
        self.panel_size = int(panel_size)
        self.judge_allowlist = set(judges) if judges is not None else None
        self.order_seed = order_seed
        self.clock = clock
        self._lock = threading.Lock()
        # (image_id, stage) -> {judge_id: choice}
        self._votes: dict[tuple[int, str], dict[str, int]] = {}
        # (judge, image, stage) -> expiry
        self._reservations: dict[tuple[str, int, str], float] = {}
        self.log_path = Path(log_path) if log_path is not None else None
        if self.log_path is not None and self.log_path.exists():
            self._replay(self.log_path)

    # -- log ---------------------------------------------------------------

    def _replay(self, path: Path) -> None:
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            vote = VoteRecord.from_json(json.loads(line))
            self._apply(vote)

    def _append_log(self, vote: VoteRecord) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(vote.to_json(), sort_keys=True) + "\n")

    # -- task assignment ----------------------------------------------------

    def _check_judge(self, judge_id: str) -> None:
        if not judge_id:
            raise VoteError("empty judge id")
        if self.judge_allowlist is not None and judge_id not in self.judge_allowlist:
            raise VoteError(f"unknown judge {judge_id!r}")

    def _judge_order(self, judge_id: str) -> list[int]:
        def key(image_id: int) -> str:
            blob = f"{self.order_seed}:{judge_id}:{image_id}".encode()
            return hashlib.sha256(blob).hexdigest()

        return sorted(self.images, key=key)

    def _votes_for(self, image_id: int, stage: str) -> dict[str, int]:
        return self._votes.get((image_id, stage), {})

    def _live_reservations(self, image_id: int, stage: str, now: float) -> set[str]:
        return {
            judge
            for (judge, img, stg), expiry in self._reservations.items()
            if img == image_id and stg == stage and expiry > now
        }

    def next_task(self, judge_id: str) -> dict | None:
        """The next (image, stage) needing this judge, or None when done."""
        with self._lock:
            self._check_judge(judge_id)
            now = self.clock()
            self._reservations = {
                k: v for k, v in self._reservations.items() if v > now
            }
            for image_id in self._judge_order(judge_id):
                stage = self._stage_for(judge_id, image_id, now)
                if stage is None:
                    continue
                self._reservations[(judge_id, image_id, stage)] = now + RESERVATION_TTL
                return {
                    "image_id": image_id,
                    "stage": stage,
                    "label_name": self.images[image_id].label_name,
                }
            return None

    def _stage_for(self, judge_id: str, image_id: int, now: float) -> str | None:
        unpert = self._votes_for(image_id, STAGE_UNPERTURBED)
        if judge_id not in unpert:
            voters = set(unpert) | self._live_reservations(image_id, STAGE_UNPERTURBED, now)
            voters.discard(judge_id)
            if len(voters) >= self.panel_size:
                return None
            return STAGE_UNPERTURBED
        if unpert[judge_id] != CHOICE_MATCHES:
            return None
        if judge_id in self._votes_for(image_id, STAGE_PERTURBED):
            return None
        return STAGE_PERTURBED

    # -- voting --------------------------------------------------------------

    def _apply(self, vote: VoteRecord) -> None:
        self._validate(vote)
        self._votes.setdefault((vote.image_id, vote.stage), {})[vote.judge_id] = vote.choice
        self._reservations.pop((vote.judge_id, vote.image_id, vote.stage), None)

    def _validate(self, vote: VoteRecord) -> None:
        if vote.image_id not in self.images:
            raise VoteError(f"unknown image {vote.image_id}")
        if vote.stage not in STAGES:
            raise VoteError(f"unknown stage {vote.stage!r}")
        if vote.choice not in CHOICES:
            raise VoteError(f"choice must be 1..4, got {vote.choice}")
        unpert = self._votes_for(vote.image_id, STAGE_UNPERTURBED)
        if vote.stage == STAGE_UNPERTURBED:
            if vote.judge_id not in unpert and len(unpert) >= self.panel_size:
                raise VoteError(f"image {vote.image_id} already has a full panel")
        else:
            if unpert.get(vote.judge_id) != CHOICE_MATCHES:
                raise VoteError(
                    "perturbed-stage vote requires this judge's choice-1 vote "
                    "on the unperturbed image"
                )

    def submit_vote(self, vote: VoteRecord) -> dict:
        """Record a vote; identical resubmissions ack without re-appending."""
        with self._lock:
            self._check_judge(vote.judge_id)
            existing = self._votes_for(vote.image_id, vote.stage).get(vote.judge_id)
            if existing is not None:
                if existing != vote.choice:
                    raise VoteError(
                        f"conflicting duplicate vote for image {vote.image_id} "
                        f"({existing} vs {vote.choice})"
                    )
                return {"accepted": True, "duplicate": True}
            self._apply(vote)
            self._append_log(vote)
            return {"accepted": True, "duplicate": False}

    # -- aggregation ----------------------------------------------------------

    def aggregate(self, image_id: int) -> Disposition:
        """Disposition for one image; raises while the panel is incomplete."""
        with self._lock:
            return self._aggregate_locked(image_id)

    def _aggregate_locked(self, image_id: int) -> Disposition:
        if image_id not in self.images:
            raise VoteError(f"unknown image {image_id}")
        unpert = self._votes_for(image_id, STAGE_UNPERTURBED)
        if len(unpert) < self.panel_size:
            raise VoteError(
                f"image {image_id}: {len(unpert)}/{self.panel_size} unperturbed votes"
            )
        keepers = sorted(j for j, c in unpert.items() if c == CHOICE_MATCHES)
        pert = self._votes_for(image_id, STAGE_PERTURBED)
        stage2: list[int] | None
        if len(keepers) >= self.panel_size // 2 + 1:
            missing = [j for j in keepers if j not in pert]
            if missing:
                raise VoteError(f"image {image_id}: missing perturbed votes from {missing}")
            stage2 = [pert[j] for j in keepers]
        else:
            stage2 = None
        outcome = decide_outcome(list(unpert.values()), stage2, self.panel_size)
        return Disposition(
            image_id=image_id,
            outcome=outcome,
            unperturbed_tally=_tally(unpert),
            perturbed_tally=_tally({j: pert[j] for j in keepers if j in pert}),
        )

    def dispositions(self) -> list[Disposition]:
        """Dispositions for every image whose votes are complete."""
        out = []
        for image_id in sorted(self.images):
            try:
                out.append(self.aggregate(image_id))
            except VoteError:
                continue
        return out


def _tally(votes: Mapping[str, int]) -> dict:
    counts = {str(c): 0 for c in CHOICES}
    for choice in votes.values():
        counts[str(choice)] += 1
    return counts
