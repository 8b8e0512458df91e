"""Shared test plumbing: a minimal Modbus/TCP client and scriptable peers."""

import asyncio

from gridghost import modbus as mb


class Client:
    def __init__(self):
        self.reader = None
        self.writer = None
        self.buffer = b""

    async def connect(self, port, host="127.0.0.1"):
        self.reader, self.writer = await asyncio.open_connection(host, port)

    async def send_raw(self, raw: bytes):
        self.writer.write(raw)
        await self.writer.drain()

    async def recv_raw(self, timeout=2) -> bytes:
        while True:
            frames_raw, rest = mb.iter_frames(self.buffer)
            if frames_raw:
                self.buffer = rest
                return frames_raw[0][1]
            data = await asyncio.wait_for(self.reader.read(4096), timeout=timeout)
            if not data:
                raise ConnectionError("peer closed")
            self.buffer += data

    async def exchange_raw(self, raw: bytes, timeout=2) -> bytes:
        await self.send_raw(raw)
        return await self.recv_raw(timeout=timeout)

    async def exchange(self, frame: mb.ModbusFrame, timeout=2) -> mb.ModbusFrame:
        raw = await self.exchange_raw(mb.encode_frame(frame), timeout=timeout)
        frames, _ = mb.decode_stream(raw)
        return frames[0]

    def close(self):
        if self.writer:
            self.writer.close()


class ScriptedPlc:
    """Upstream endpoint under test control: holds requests until released."""

    def __init__(self, auto_respond=None):
        # auto_respond: callable frame -> frame | None (None = swallow)
        self.auto_respond = auto_respond
        self.received = []  # decoded frames in arrival order
        self.raw_received = b""
        self._writer = None
        self._server = None

    @property
    def port(self):
        return self._server.sockets[0].getsockname()[1]

    async def start(self):
        self._server = await asyncio.start_server(self._handle, host="127.0.0.1", port=0)

    async def stop(self):
        self._server.close()
        await self._server.wait_closed()

    async def _handle(self, reader, writer):
        self._writer = writer
        buffer = b""
        while True:
            data = await reader.read(4096)
            if not data:
                break
            self.raw_received += data
            buffer += data
            try:
                frames, buffer = mb.decode_stream(buffer)
            except mb.FramingError:
                buffer = b""
                continue
            for frame in frames:
                self.received.append(frame)
                if self.auto_respond is not None:
                    response = self.auto_respond(frame)
                    if response is not None:
                        writer.write(mb.encode_frame(response))
            await writer.drain()

    async def push(self, frame: mb.ModbusFrame):
        self._writer.write(mb.encode_frame(frame))
        await self._writer.drain()


async def wait_until(predicate, timeout=2, interval=0.005):
    deadline = asyncio.get_event_loop().time() + timeout
    while True:
        if predicate():
            return
        if asyncio.get_event_loop().time() > deadline:
            raise TimeoutError("condition not reached")
        await asyncio.sleep(interval)
