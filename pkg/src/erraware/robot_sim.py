"""Kinematics-free robot controller stand-in.

Plays a scripted action timeline and publishes movement, gripper and
time-since-movement. Pauses freeze script progression; everything after a
pause shifts by its duration.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

from .events import Command, CommandKind, Gripper, RobotStatus

log = logging.getLogger(__name__)

# reported when the robot has not moved yet in this run
NEVER_MOVED = 2**31 - 1
INF = math.inf


@dataclass(frozen=True)
class RobotAction:
    id: str
    start: int
    duration_millis: int
    moving: bool
    gripper_profile: tuple[tuple[int, Gripper], ...] = ()
    is_error: str | None = None

    @property
    def end(self) -> int:
        return self.start + self.duration_millis


class Script:
    """Validated, indexed action timeline (script time, ms)."""

    def __init__(self, actions: Sequence[RobotAction]):
        prev = None
        for a in actions:
            if a.duration_millis <= 0:
                raise ValueError(f"action {a.id!r}: duration must be positive")
            if a.start < 0:
                raise ValueError(f"action {a.id!r}: negative start")
            if prev is not None and a.start < prev.end:
                raise ValueError(f"action {a.id!r} overlaps or precedes {prev.id!r}")
            for off, _ in a.gripper_profile:
                if not 0 <= off <= a.duration_millis:
                    raise ValueError(f"action {a.id!r}: gripper offset {off} outside the action")
            prev = a
        self.actions = tuple(actions)
        self._starts = [a.start for a in self.actions]
        moving = [a for a in self.actions if a.moving]
        self._moving = moving
        self._moving_starts = [a.start for a in moving]
        grip = sorted(
            ((a.start + off, i, g) for a in self.actions for i, (off, g) in enumerate(a.gripper_profile)),
            key=lambda x: (x[0], x[1]),
        )
        self._grip_times = [g[0] for g in grip]
        self._grip_states = [g[2] for g in grip]
        self.by_id = {a.id: a for a in self.actions}
        if len(self.by_id) != len(self.actions):
            raise ValueError("duplicate action ids")

    @property
    def end(self) -> int:
        return self.actions[-1].end if self.actions else 0

    def action_at(self, s: float) -> RobotAction | None:
        i = bisect.bisect_right(self._starts, s) - 1
        if i >= 0 and s < self.actions[i].end:
            return self.actions[i]
        return None

    def gripper_at(self, s: float) -> Gripper:
        i = bisect.bisect_right(self._grip_times, s) - 1
        return self._grip_states[i] if i >= 0 else Gripper.OPEN

    def last_moving_before(self, s: float) -> RobotAction | None:
        """Latest moving action that started strictly before script time ``s``."""
        i = bisect.bisect_left(self._moving_starts, s) - 1
        return self._moving[i] if i >= 0 else None


@dataclass
class PauseLedger:
    """Wall-time pause intervals (end None while open) and recovery intervals."""

    pauses: list[list] = field(default_factory=list)
    recoveries: list[list] = field(default_factory=list)

    def paused_at(self, now: int) -> bool:
        for ps, pe in reversed(self.pauses):
            if ps <= now:
                return pe is None or now < pe
        return False

    def paused_before(self, now: float) -> float:
        total = 0.0
        for ps, pe in self.pauses:
            if ps >= now:
                break
            total += (now if pe is None else min(pe, now)) - ps
        return total

    def script_time(self, now: float) -> float:
        return now - self.paused_before(now)

    def first_wall(self, s: float) -> float:
        """Earliest wall time at which the script reaches ``s`` (inf if never)."""
        wall = s
        for ps, pe in self.pauses:
            if ps < wall:
                if pe is None:
                    return INF
                wall += pe - ps
            else:
                break
        return wall

    def total_paused(self) -> int:
        return sum(pe - ps for ps, pe in self.pauses if pe is not None)

    def recovering_at(self, now: int) -> bool:
        return any(rs <= now < re for rs, re in self.recoveries)


def status_at(script: Script, now: int, ledger: PauseLedger) -> RobotStatus:
    """Robot status at wall time ``now``; pure in (script, ledger)."""
    s = ledger.script_time(now)
    paused = ledger.paused_at(now)
    recovering = ledger.recovering_at(now)
    act = script.action_at(s)
    moving = recovering or (not paused and act is not None and act.moving)
    if moving:
        since = 0
    else:
        last = -INF
        for rs, re in ledger.recoveries:
            if re <= now:
                last = max(last, re)
        m = script.last_moving_before(s)
        if m is not None:
            last = max(last, ledger.first_wall(min(m.end, s)))
        since = NEVER_MOVED if last == -INF else int(now - last)
    return RobotStatus(
        t=now,
        moving=moving,
        gripper=script.gripper_at(s),
        millis_since_last_movement=since,
        current_action_id=act.id if act else None,
    )


class RobotSim:
    """Owns the pause ledger and honors engine commands."""

    def __init__(self, script: Script, recovery_millis: int = 4000):
        if recovery_millis <= 0:
            raise ValueError("recovery duration must be positive")
        self.script = script
        self.recovery_millis = recovery_millis
        self.ledger = PauseLedger()
        self.stopped = False
        self.recovery_done_at: int | None = None
        self.spoken: list[Command] = []

    def status(self, now: int) -> RobotStatus:
        return status_at(self.script, now, self.ledger)

    def apply_command(self, cmd: Command) -> None:
        t = cmd.t
        led = self.ledger
        if cmd.kind is CommandKind.PAUSE:
            if not led.paused_at(t):
                led.pauses.append([t, None])
        elif cmd.kind is CommandKind.RESUME:
            if self.stopped:
                log.warning("resume at t=%d ignored: robot is stopped", t)
            elif not led.paused_at(t):
                log.warning("resume at t=%d without a prior pause; ignored", t)
            else:
                led.pauses[-1][1] = t
        elif cmd.kind is CommandKind.STOP:
            if not led.paused_at(t):
                led.pauses.append([t, None])
            self.stopped = True
        elif cmd.kind is CommandKind.RECOVER:
            # a new recovery supersedes one still in progress
            if led.recoveries and led.recoveries[-1][1] > t:
                led.recoveries[-1][1] = t
            done = t + self.recovery_millis
            led.recoveries.append([t, done])
            self.recovery_done_at = done
        elif cmd.kind is CommandKind.SAY:
            self.spoken.append(cmd)

    def recovery_complete_status(self, now: int) -> RobotStatus | None:
        """The one-off status marking recovery completion, if due exactly now."""
        if self.recovery_done_at != now:
            return None
        self.recovery_done_at = None
        st = self.status(now)
        return RobotStatus(st.t, st.moving, st.gripper, st.millis_since_last_movement, st.current_action_id, True)

    def wall_time_of(self, script_t: int) -> float:
        return self.ledger.first_wall(script_t)

    def finished(self, now: int) -> bool:
        return self.ledger.script_time(now) >= self.script.end
