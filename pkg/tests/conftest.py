import json
import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from oracles import build_tracks as oracle_build

from structvis.geometry import Detection, FrameRef, PixelBox
from structvis.tracking import KeyframeObservation, Track, TrackSet

DATA = Path(__file__).parent / "data"
LABELS = ["cube", "sphere", "cylinder", "bag", "red cube", "t-shirt", "cup"]


def random_pixel_box(rng, width, height, integer=False):
    xs = sorted(rng.uniform(0, width) for _ in range(2))
    ys = sorted(rng.uniform(0, height) for _ in range(2))
    if integer:
        xs, ys = [round(x) for x in xs], [round(y) for y in ys]
    return (xs[0], ys[0], xs[1], ys[1])


def random_scene(rng, threshold=0.3, max_keyframes=4, max_dets=5, size=20):
    """Small scene for tracker oracle comparison.

    Boxes live on a coarse integer grid so near-duplicates (IoU around 0.5)
    show up often. Returns ``(raw_keyframes, observations)``: the first for
    the oracle, the second for the package.
    """
    n_kf = rng.randint(1, max_keyframes)
    frames = sorted(rng.sample(range(0, 120), n_kf))
    raw, obs = [], []
    live = []  # live ids according to the oracle, so propagation only names live tracks
    last_boxes = {}
    for frame in frames:
        dets = []
        for _ in range(rng.randint(0, max_dets)):
            r = rng.random()
            if last_boxes and r < 0.4:
                source = rng.choice(list(last_boxes.values()))
            elif dets and r < 0.65:
                source = rng.choice(dets)[1]
            else:
                source = None
            if source is None:
                b = random_pixel_box(rng, size, size, integer=True)
            else:
                # jittered copy: IoU with the source lands on both sides of 0.5
                b = tuple(max(0, c + rng.randint(-1, 1)) for c in source)
                b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
            score = rng.choice([0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0])
            dets.append((rng.choice(LABELS), b, score))
        propagated = {}
        for tid in live:
            r = rng.random()
            if r < 0.2:
                propagated[tid] = None
            elif r < 0.3:
                continue  # tracker silent about this track: treated as lost
            else:
                propagated[tid] = random_pixel_box(rng, size, size, integer=True)
        raw.append((frame, dets, dict(propagated)))
        obs.append(
            KeyframeObservation(
                FrameRef(frame),
                [Detection(l, PixelBox(*b), s) for l, b, s in dets],
                [(tid, None if b is None else PixelBox(*b)) for tid, b in propagated.items()],
            )
        )
        tracks = oracle_build(raw, threshold)
        live = [tid for tid, _, o in tracks if o[-1][0] == frame]
        last_boxes = {tid: o[-1][1] for tid, _, o in tracks if tid in live}
    return raw, obs


def random_trackset(rng, max_keyframes=12, max_tracks=5, width=640, height=480):
    """Arbitrary TrackSet: tracks visible at random subsets of keyframes."""
    n_kf = rng.randint(1, max_keyframes)
    frames = sorted(rng.sample(range(0, 3000), n_kf))
    tracks = []
    for tid in range(rng.randint(0, max_tracks)):
        visible = sorted(rng.sample(frames, rng.randint(1, n_kf)))
        obs = [(FrameRef(f), PixelBox(*random_pixel_box(rng, width, height))) for f in visible]
        tracks.append(Track(tid, rng.choice(LABELS), obs, alive=False))
    return TrackSet(tracks, "vid", width, height, keyframes=[FrameRef(f) for f in frames])


def dense_trackset(rng, max_keyframes=40, max_tracks=5, width=640, height=480):
    """TrackSet whose script cost depends only on the number of kept keyframes.

    Every track is visible at every keyframe and every frame index is below
    1000, so each kept keyframe adds the same number of tokens.
    """
    n_kf = rng.randint(1, max_keyframes)
    frames = sorted(rng.sample(range(0, 1000), n_kf))
    tracks = []
    for tid in range(rng.randint(1, max_tracks)):
        obs = [(FrameRef(f), PixelBox(*random_pixel_box(rng, width, height))) for f in frames]
        tracks.append(Track(tid, rng.choice(LABELS), obs, alive=False))
    return TrackSet(tracks, "vid", width, height, keyframes=[FrameRef(f) for f in frames])


@pytest.fixture
def rng():
    return random.Random(1234)


class MockChatServer:
    """Local chat-completions endpoint with failure injection and in-flight tracking."""

    def __init__(self, delay=0.0):
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.fail_plan = {}  # (video_id marker) -> remaining failures
        self.always_fail = set()
        self.requests = []
        self.lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers["Content-Length"])
                body = json.loads(self.rfile.read(length))
                image_url = body["messages"][0]["content"][0]["image_url"]["url"]
                with server.lock:
                    server.calls += 1
                    server.in_flight += 1
                    server.max_in_flight = max(server.max_in_flight, server.in_flight)
                    server.requests.append(body)
                    tag = image_url
                    fail = tag in server.always_fail
                    if server.fail_plan.get(tag, 0) > 0:
                        server.fail_plan[tag] -= 1
                        fail = True
                try:
                    time.sleep(server.delay)
                    if fail:
                        self.send_response(503)
                        self.end_headers()
                        return
                    caption = f"caption for {len(image_url)} {image_url[-12:]}"
                    payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": f"  {caption}\n"}}]})
                    data = payload.encode()
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                finally:
                    with server.lock:
                        server.in_flight -= 1

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def mock_server():
    server = MockChatServer(delay=0.02)
    yield server
    server.close()


# -- acceptance summary -------------------------------------------------------

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        name = report.nodeid.split("::")[-1]
        prev = _acceptance.get(name)
        if prev != "FAIL":
            _acceptance[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"{_acceptance[name]}  {name}")
