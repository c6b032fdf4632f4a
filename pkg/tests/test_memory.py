import pytest

from pimhtap.errors import ProtocolError
from pimhtap.geometry import Geometry
from pimhtap.memory import CPU, PIM, MemorySystem


def make_memory():
    return MemorySystem(Geometry())


def test_cpu_access_is_billed_in_lines():
    m = make_memory()
    start, end = m.cpu_access_lines(10, useful_bytes=100)
    assert start == 0.0
    assert end == pytest.approx(10 * 64 / 25.6e9)
    assert m.stats[CPU].bytes_billed == 640
    assert m.stats[CPU].useful_bytes == 100
    assert m.clock.now == end


def test_cpu_transfer_rounds_up_to_lines():
    m = make_memory()
    m.cpu_transfer(65)
    assert m.stats[CPU].bytes_billed == 128


def test_zero_length_access_is_free():
    m = make_memory()
    assert m.cpu_access_lines(0) == (0.0, 0.0)
    assert m.stats[CPU].accesses == 0


def test_pim_access_rounds_to_bursts_and_overlaps_units():
    m = make_memory()
    # three units working in parallel: cost is the slowest unit's time
    start, end = m.pim_access([100, 7, 64])
    assert m.stats[PIM].bytes_billed == 104 + 8 + 64
    assert end - start == pytest.approx(104 / 1e9)


def test_pim_access_scalar_form():
    m = make_memory()
    _, end = m.pim_access(16)
    assert end == pytest.approx(16 / 1e9)


def test_handover_billed_per_rank():
    m = make_memory()
    banks = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0)]
    start, end = m.handover(banks, PIM)
    assert end - start == pytest.approx(3 * 0.2e-6)
    assert m.handovers == 3
    for b in banks:
        assert m.bank(*b).controller == PIM


def test_cpu_access_to_pim_bank_is_a_protocol_error():
    m = make_memory()
    m.handover([(0, 0, 0)], PIM)
    with pytest.raises(ProtocolError):
        m.cpu_access_lines(1, banks=[(0, 0, 0)])


def test_pim_access_to_cpu_bank_is_a_protocol_error():
    m = make_memory()
    with pytest.raises(ProtocolError):
        m.pim_access(8, banks=[(0, 0, 0)])


def test_cpu_stalls_until_pim_hold_ends():
    m = make_memory()
    m.handover([(0, 0, 0)], PIM)
    m.handover([(0, 0, 0)], CPU)
    hold = m.bank(0, 0, 0).pim_hold_until
    assert hold > 0
    start, _ = m.cpu_access_lines(1, banks=[(0, 0, 0)], at=hold / 2)
    assert start == pytest.approx(hold)
    assert m.stats[CPU].stall_time == pytest.approx(hold / 2)


def test_access_after_hold_does_not_stall():
    m = make_memory()
    m.handover([(0, 0, 0)], PIM)
    m.handover([(0, 0, 0)], CPU)
    hold = m.bank(0, 0, 0).pim_hold_until
    start, _ = m.cpu_access_lines(1, banks=[(0, 0, 0)], at=hold + 1e-9)
    assert start == pytest.approx(hold + 1e-9)


def test_control_message_counter():
    m = make_memory()
    m.cpu_message()
    m.cpu_message()
    assert m.control_messages == 2
    # a message is one cache line on the bus
    assert m.stats[CPU].bytes_billed == 128


def test_bank_bounds_checked():
    m = make_memory()
    with pytest.raises(ProtocolError):
        m.bank(4, 0, 0)
    with pytest.raises(ProtocolError):
        m.bank(0, 4, 0)
    with pytest.raises(ProtocolError):
        m.bank(0, 0, 8)


def test_handover_target_checked():
    m = make_memory()
    with pytest.raises(ProtocolError):
        m.handover([(0, 0, 0)], "dma")


def test_event_log_optional():
    quiet = MemorySystem(Geometry(), track_events=False)
    quiet.cpu_transfer(64)
    assert quiet.events is None
    loud = make_memory()
    loud.cpu_transfer(64)
    assert loud.events and loud.events[0].actor == CPU


def test_clock_monotone_across_actors():
    m = make_memory()
    m.cpu_transfer(640)
    t1 = m.clock.now
    m.pim_access(800)
    assert m.clock.now > t1
    m.bill("pim", 1e-6)
    assert m.clock.now == pytest.approx(t1 + 800 / 1e9 + 1e-6)
