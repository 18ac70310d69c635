import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erraware.events import Command, CommandKind, Gripper
from erraware.robot_sim import NEVER_MOVED, PauseLedger, RobotAction, RobotSim, Script, status_at


def script():
    return Script([
        RobotAction("reach", 0, 10000, True, ((0, Gripper.OPEN),)),
        RobotAction("hold", 10000, 5000, False, ((0, Gripper.HOLDING),)),
        RobotAction("place", 20000, 4000, True, ((4000, Gripper.OPEN),)),
    ])


def test_status_inside_moving_segment():
    st = status_at(script(), 5000, PauseLedger())
    assert st.moving and st.millis_since_last_movement == 0
    assert st.current_action_id == "reach"


def test_status_after_segment_end():
    st = status_at(script(), 12000, PauseLedger())
    assert not st.moving and st.millis_since_last_movement == 2000
    assert st.gripper is Gripper.HOLDING and st.current_action_id == "hold"
    gap = status_at(script(), 17000, PauseLedger())
    assert gap.current_action_id is None and gap.millis_since_last_movement == 7000


def test_status_before_any_movement():
    sc = Script([RobotAction("wait", 0, 1000, False), RobotAction("go", 1000, 1000, True)])
    assert status_at(sc, 500, PauseLedger()).millis_since_last_movement == NEVER_MOVED


def test_pause_mid_segment_shifts_end_by_pause_length():
    sim = RobotSim(script())
    sim.apply_command(Command(CommandKind.PAUSE, 4000))
    assert not sim.status(5000).moving
    assert sim.status(6000).millis_since_last_movement == 2000
    sim.apply_command(Command(CommandKind.RESUME, 7000))
    assert sim.status(12999).moving
    st = sim.status(13000)
    assert not st.moving and st.current_action_id == "hold"
    assert sim.wall_time_of(20000) == 23000


def test_double_pause_is_single_freeze():
    sim = RobotSim(script())
    sim.apply_command(Command(CommandKind.PAUSE, 4000))
    sim.apply_command(Command(CommandKind.PAUSE, 5000))
    sim.apply_command(Command(CommandKind.RESUME, 7000))
    assert sim.ledger.pauses == [[4000, 7000]]
    assert sim.wall_time_of(10000) == 13000


def test_resume_without_pause_is_noop(caplog):
    sim = RobotSim(script())
    sim.apply_command(Command(CommandKind.RESUME, 1000))
    assert sim.ledger.pauses == []
    assert "without a prior pause" in caplog.text


def test_stop_freezes_permanently():
    sim = RobotSim(script())
    sim.apply_command(Command(CommandKind.STOP, 3000))
    sim.apply_command(Command(CommandKind.RESUME, 4000))
    assert not sim.status(50000).moving
    assert sim.wall_time_of(5000) == float("inf")


def test_recover_completes_after_behavior_duration():
    sim = RobotSim(script(), recovery_millis=4000)
    sim.apply_command(Command(CommandKind.PAUSE, 12000))
    sim.apply_command(Command(CommandKind.RECOVER, 12000))
    assert sim.recovery_done_at == 16000
    assert sim.status(14000).moving  # recovery motion counts as movement
    assert sim.recovery_complete_status(15900) is None
    done = sim.recovery_complete_status(16000)
    assert done.recovery_complete and done.t == 16000
    assert sim.recovery_complete_status(16000) is None
    assert sim.status(17000).millis_since_last_movement == 1000


def test_say_is_recorded():
    sim = RobotSim(script())
    cmd = Command(CommandKind.SAY, 100, "hello", "query")
    sim.apply_command(cmd)
    assert sim.spoken == [cmd]


def test_script_validation():
    with pytest.raises(ValueError):
        Script([RobotAction("a", 0, 1000, True), RobotAction("b", 500, 1000, True)])
    with pytest.raises(ValueError):
        Script([RobotAction("a", 0, 0, True)])
    with pytest.raises(ValueError):
        RobotSim(script(), recovery_millis=0)


def test_no_commands_matches_script():
    sc = script()
    for t in range(0, 26000, 100):
        st = status_at(sc, t, PauseLedger())
        act = sc.action_at(t)
        assert st.moving == bool(act and act.moving)


pauses = st.lists(st.tuples(st.integers(0, 30000), st.integers(1, 5000)), max_size=6)


@settings(max_examples=150, deadline=None)
@given(pauses)
def test_pause_conservation_and_purity(ps):
    sim = RobotSim(script())
    t = 0
    for start, length in sorted(ps):
        start = max(start, t)
        sim.apply_command(Command(CommandKind.PAUSE, start))
        sim.apply_command(Command(CommandKind.RESUME, start + length))
        t = start + length + 1
    total = sim.ledger.total_paused()
    # every script timestamp after the last pause moves by exactly the total pause
    last_end = max((pe for _, pe in sim.ledger.pauses), default=0)
    for s in (24000, 40000):
        if sim.wall_time_of(s) >= last_end and s >= last_end:
            assert sim.wall_time_of(s) == s + total
    for now in range(0, 40000, 700):
        assert sim.status(now) == sim.status(now)
        assert status_at(sim.script, now, sim.ledger) == sim.status(now)
