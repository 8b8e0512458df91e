"""Rewriting-proxy behavior: transparency, arming, windows, fail-open."""

import asyncio

from netutil import Client, ScriptedPlc, wait_until

from gridghost import capture as cap
from gridghost import grid as gr
from gridghost import iaml
from gridghost import modbus as mb
from gridghost import plc
from gridghost import proxy as px

ZERO_RULES = """
<IAML>
  <Change PacketToChange="RESPONSE">
    <Query>
      <QueryEntry Key="TYPE" Value="REQUEST"/>
      <QueryEntry Key="FUNCTION" Value="3"/>
      <QueryEntry Key="ADDRESS" Value="130"/>
    </Query>
    <NewValues><NewValueEntry Key="DATA" Value="0,0"/></NewValues>
  </Change>
</IAML>
"""

OPPOSITE_RULES = """
<IAML>
  <Change PacketToChange="REQUEST">
    <Query>
      <QueryEntry Key="TYPE" Value="REQUEST"/>
      <QueryEntry Key="FUNCTION" Value="5"/>
    </Query>
    <NewValues><NewValueEntry Key="DATA" Value="65280-X"/></NewValues>
  </Change>
  <Change PacketToChange="RESPONSE">
    <Query>
      <QueryEntry Key="TYPE" Value="REQUEST"/>
      <QueryEntry Key="FUNCTION" Value="5"/>
    </Query>
    <NewValues><NewValueEntry Key="DATA" Value="65280-X"/></NewValues>
  </Change>
</IAML>
"""

SHIFT_RULES = """
<IAML>
  <Change PacketToChange="REQUEST">
    <Query>
      <QueryEntry Key="TYPE" Value="REQUEST"/>
      <QueryEntry Key="FUNCTION" Value="3"/>
      <QueryEntry Key="ADDRESS" Value="130"/>
    </Query>
    <NewValues><NewValueEntry Key="STARTING_ADDRESS" Value="131"/></NewValues>
  </Change>
</IAML>
"""


class FakeClock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t


async def start_plc_and_proxy(rules, rtu_id="RTU_01", unit_id=1, **proxy_kw):
    grid = gr.Grid()
    server = plc.PlcServer(plc.PlcConfig(rtu_id=rtu_id, port=0, unit_id=unit_id), grid)
    await server.start()
    channel = px.ChannelConfig(
        rtu_id=rtu_id, listen_host="127.0.0.1", listen_port=0,
        upstream_host="127.0.0.1", upstream_port=server.bound_port)
    records = []
    prx = px.AttackProxy([channel], rules, tap=records.append, **proxy_kw)
    await prx.start()
    return grid, server, prx, records


def by_side(records, segment, direction):
    return [r for r in records if r.segment == segment and r.direction == direction]


def test_transparent_proxy_is_byte_identical():
    async def main():
        grid, server, prx, records = await start_plc_and_proxy([])
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        for tid in range(20):
            resp = await c.exchange(mb.read_request(tid, 1, 130, 2))
            assert mb.parse_read_response(resp).values == (11391, 2318)
        echo = await c.exchange_raw(mb.encode_frame(mb.write_coil(99, 1, 0, on=True)))
        assert echo == mb.encode_frame(mb.write_coil(99, 1, 0, on=True))
        c.close()
        await wait_until(lambda: len(by_side(records, "hmi", "response")) == 21)
        for direction in ("query", "response"):
            hmi = [r.raw for r in by_side(records, "hmi", direction)]
            plc_side = [r.raw for r in by_side(records, "plc", direction)]
            assert hmi == plc_side
            assert len(hmi) == 21
        assert all(not r.rewritten for r in records)
        await prx.stop()
        await server.stop()
    asyncio.run(main())


def test_armed_response_rewrite():
    async def main():
        grid, server, prx, records = await start_plc_and_proxy(iaml.parse(ZERO_RULES))
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        resp = await c.exchange(mb.read_request(5, 1, 130, 2))
        assert mb.parse_read_response(resp).values == (0, 0)
        assert resp.tid == 5
        # breaker poll unrelated to the rule passes untouched
        resp = await c.exchange(mb.read_request(6, 1, 1, 1))
        assert mb.parse_read_response(resp).values == (1,)
        c.close()
        await wait_until(lambda: len(by_side(records, "hmi", "response")) == 2)
        plc_resp = by_side(records, "plc", "response")[0]
        hmi_resp = by_side(records, "hmi", "response")[0]
        assert plc_resp.values == (11391, 2318) and not plc_resp.rewritten
        assert hmi_resp.values == (0, 0) and hmi_resp.rewritten
        # requests were never touched
        assert [r.raw for r in by_side(records, "hmi", "query")] == \
               [r.raw for r in by_side(records, "plc", "query")]
        st = prx.status()["channels"]["RTU_01"]
        assert st["armed"] == 1 and st["rewritten_responses"] == 1
        await prx.stop()
        await server.stop()
    asyncio.run(main())


def test_window_gating_and_late_armed_response():
    async def main():
        sink = ScriptedPlc()
        await sink.start()
        clock = FakeClock(5.0)
        channel = px.ChannelConfig("RTU_01", "127.0.0.1", 0, "127.0.0.1", sink.port)
        prx = px.AttackProxy([channel], iaml.parse(ZERO_RULES),
                             windows=[(10.0, 20.0)], clock=clock)
        await prx.start()
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))

        # outside the window nothing arms
        await c.send_raw(mb.encode_frame(mb.read_request(1, 1, 130, 2)))
        await wait_until(lambda: len(sink.received) == 1)
        await sink.push(mb.read_response(1, 1, [11391, 2318]))
        resp = await c.recv_raw()
        assert mb.parse_read_response(mb.decode_stream(resp)[0][0]).values == (11391, 2318)

        # armed inside the window, response arrives after it closed: still applied
        clock.t = 19.9
        await c.send_raw(mb.encode_frame(mb.read_request(2, 1, 130, 2)))
        await wait_until(lambda: len(sink.received) == 2)
        clock.t = 25.0
        await sink.push(mb.read_response(2, 1, [11391, 2318]))
        resp = await c.recv_raw()
        assert mb.parse_read_response(mb.decode_stream(resp)[0][0]).values == (0, 0)

        c.close()
        await prx.stop()
        await sink.stop()
    asyncio.run(main())


def test_tid_armed_fifo_eviction():
    async def main():
        sink = ScriptedPlc()  # never responds
        await sink.start()
        channel = px.ChannelConfig("RTU_01", "127.0.0.1", 0, "127.0.0.1", sink.port)
        prx = px.AttackProxy([channel], iaml.parse(ZERO_RULES))
        await prx.start()
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        blob = b"".join(
            mb.encode_frame(mb.read_request(tid, 1, 130, 2)) for tid in range(100))
        await c.send_raw(blob)
        await wait_until(lambda: len(sink.received) == 100)
        state = prx.state["RTU_01"]
        assert len(state.tid_armed) == px.TID_ARMED_LIMIT
        assert state.counters["evicted"] == 100 - px.TID_ARMED_LIMIT
        assert list(state.tid_armed) == list(range(36, 100))
        c.close()
        await prx.stop()
        await sink.stop()
    asyncio.run(main())


def test_half_duplex_shifts_requests_and_passes_responses():
    async def main():
        grid, server, prx, records = await start_plc_and_proxy(
            iaml.parse(SHIFT_RULES), half_duplex=True)
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        resp = await c.exchange(mb.read_request(7, 1, 130, 2))
        # PLC answered the shifted read: voltage then the zero register
        assert mb.parse_read_response(resp).values == (2318, 0)
        assert resp.tid == 7
        c.close()
        await wait_until(lambda: len(by_side(records, "hmi", "response")) == 1)
        plc_req = by_side(records, "plc", "query")[0]
        assert plc_req.start_address == 131 and plc_req.rewritten
        hmi_req = by_side(records, "hmi", "query")[0]
        assert hmi_req.start_address == 130
        # response passed byte-for-byte
        assert by_side(records, "hmi", "response")[0].raw == \
               by_side(records, "plc", "response")[0].raw
        await prx.stop()
        await server.stop()
    asyncio.run(main())


def test_opposite_command_and_reversed_echo():
    async def main():
        grid, server, prx, records = await start_plc_and_proxy(
            iaml.parse(OPPOSITE_RULES))
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        sent = mb.encode_frame(mb.write_coil(40, 1, 0, on=False))  # operator opens
        echo = await c.exchange_raw(sent)
        assert echo == sent  # the echo the operator sees confirms the open
        assert grid.state.closed["RTU_01"] is True  # but the switch stayed closed
        c.close()
        await wait_until(lambda: len(by_side(records, "plc", "response")) == 1)
        plc_req = by_side(records, "plc", "query")[0]
        assert plc_req.value == mb.COIL_ON and plc_req.rewritten
        plc_echo = by_side(records, "plc", "response")[0]
        assert plc_echo.value == mb.COIL_ON
        hmi_echo = by_side(records, "hmi", "response")[0]
        assert hmi_echo.value == mb.COIL_OFF and hmi_echo.rewritten
        await prx.stop()
        await server.stop()
    asyncio.run(main())


def test_global_stage_shared_across_channels():
    stage_rules = iaml.parse("""
    <IAML>
      <Change PacketToChange="RESPONSE">
        <Query>
          <QueryEntry Key="TYPE" Value="REQUEST"/>
          <QueryEntry Key="FUNCTION" Value="3"/>
          <QueryEntry Key="ADDRESS" Value="130"/>
          <QueryEntry Key="GLOBAL_STAGE" Value="1"/>
        </Query>
        <NewValues><NewValueEntry Key="DATA" Value="0,0"/></NewValues>
      </Change>
      <Change PacketToChange="REQUEST">
        <Query>
          <QueryEntry Key="TYPE" Value="REQUEST"/>
          <QueryEntry Key="FUNCTION" Value="5"/>
          <QueryEntry Key="GLOBAL_STAGE" Value="0"/>
        </Query>
        <NewValues><NewValueEntry Key="GLOBAL_STAGE" Value="1"/></NewValues>
      </Change>
    </IAML>
    """)

    async def main():
        grid = gr.Grid()
        servers = {}
        channels = []
        for rtu, unit in [("RTU_01", 1), ("RTU_02", 2)]:
            s = plc.PlcServer(plc.PlcConfig(rtu_id=rtu, port=0, unit_id=unit), grid)
            await s.start()
            servers[rtu] = s
            channels.append(px.ChannelConfig(rtu, "127.0.0.1", 0,
                                             "127.0.0.1", s.bound_port))
        prx = px.AttackProxy(channels, stage_rules)
        await prx.start()

        c2 = Client()
        await c2.connect(prx.bound_port("RTU_02"))
        resp = await c2.exchange(mb.read_request(1, 2, 130, 2))
        assert mb.parse_read_response(resp).values == (8391, 2318)  # stage 0: untouched

        c1 = Client()
        await c1.connect(prx.bound_port("RTU_01"))
        await c1.exchange(mb.write_coil(2, 1, 0, on=True))  # flips global stage

        resp = await c2.exchange(mb.read_request(3, 2, 130, 2))
        assert mb.parse_read_response(resp).values == (0, 0)  # stage 1 seen on RTU_02
        assert prx.status()["global_stage"] == 1

        c1.close()
        c2.close()
        await prx.stop()
        for s in servers.values():
            await s.stop()
    asyncio.run(main())


def test_rule_fault_fails_open():
    bad_rules = iaml.parse(ZERO_RULES.replace('Value="0,0"', 'Value="100/X"'))

    async def main():
        grid, server, prx, records = await start_plc_and_proxy(bad_rules)
        grid.set_switch("RTU_01", close=False)  # current reads 0 now
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        resp = await c.exchange(mb.read_request(1, 1, 130, 2))
        # rewrite divides by zero; proxy forwards the truth instead
        assert mb.parse_read_response(resp).values == (0, 0)
        c.close()
        await wait_until(lambda: len(by_side(records, "hmi", "response")) == 1)
        assert not by_side(records, "hmi", "response")[0].rewritten
        assert prx.status()["channels"]["RTU_01"]["faults"] == 1
        await prx.stop()
        await server.stop()
    asyncio.run(main())


def test_non_modbus_bytes_relay_verbatim():
    async def main():
        sink = ScriptedPlc()
        await sink.start()
        channel = px.ChannelConfig("RTU_01", "127.0.0.1", 0, "127.0.0.1", sink.port)
        prx = px.AttackProxy([channel], iaml.parse(ZERO_RULES))
        await prx.start()
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        garbage = bytes.fromhex("0001dead0006010300820002") + b"not modbus at all"
        await c.send_raw(garbage)
        await wait_until(lambda: sink.raw_received == garbage)
        assert prx.status()["channels"]["RTU_01"]["faults"] == 1
        c.close()
        await prx.stop()
        await sink.stop()
    asyncio.run(main())


def test_unreachable_upstream_surfaces_in_status():
    async def main():
        channel = px.ChannelConfig("RTU_01", "127.0.0.1", 0, "127.0.0.1", 1)
        prx = px.AttackProxy([channel], [])
        await prx.start()
        c = Client()
        await c.connect(prx.bound_port("RTU_01"))
        data = await asyncio.wait_for(c.reader.read(64), timeout=10)
        assert data == b""  # proxy gave up and closed
        assert prx.status()["channels"]["RTU_01"]["health"] == "down"
        await prx.stop()
    asyncio.run(main())
