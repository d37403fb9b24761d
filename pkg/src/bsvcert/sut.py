"""System-under-test harness.

A SUT is either an in-process evaluator looked up by name, or an external
executable that speaks newline-delimited JSON on stdin/stdout::

    -> {"id": 7, "params": {"glideslope_deg": 3.1, "distance_nm": 1.2}}
    <- {"id": 7, "failure": true, "severity": 0.4}

One child process serves many requests. Batches may fan out over a bounded
pool of workers, each owning its own child process; results are always
collated back into input order.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import queue
import shlex
import subprocess
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

from .odd import OddPoint

log = logging.getLogger(__name__)

IN_PROCESS = "in_process"
EXTERNAL_PROCESS = "external_process"
DEFAULT_TIMEOUT_S = 30.0


class HarnessError(RuntimeError):
    pass


class HarnessTimeoutError(HarnessError):
    pass


class ProtocolError(HarnessError):
    pass


class ProcessError(HarnessError):
    pass


class SchemaError(HarnessError, KeyError):
    pass


class BatchError(HarnessError):
    """A batch aborted; ``completed`` holds the trials finished before the failing index."""

    def __init__(self, cause: BaseException, completed: list):
        super().__init__(f"batch aborted after {len(completed)} trials: {cause}")
        self.cause = cause
        self.completed = completed


@dataclass(frozen=True)
class Trial:
    point: OddPoint
    failure: bool
    severity: Optional[float] = None
    iteration: int = 1
    acquisition: Optional[str] = None

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError("trial iteration must be >= 1")

    def to_dict(self) -> dict:
        out = {
            "iteration": self.iteration,
            "point": self.point.to_dict(),
            "failure": self.failure,
            "severity": self.severity,
        }
        if self.acquisition is not None:
            out["acquisition"] = self.acquisition
        return out

    @classmethod
    def from_dict(cls, data) -> "Trial":
        return cls(
            OddPoint(dict(data["point"])),
            bool(data["failure"]),
            data.get("severity"),
            int(data.get("iteration", 1)),
            data.get("acquisition"),
        )


# -- wire protocol -----------------------------------------------------------


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class EvalRequest:
    id: int
    params: Mapping[str, float]

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "params": dict(self.params)})

    @classmethod
    def from_line(cls, line: str) -> "EvalRequest":
        obj = _load_object(line)
        if not _is_int(obj.get("id")):
            raise ProtocolError("request id must be an integer")
        params = obj.get("params")
        if not isinstance(params, dict):
            raise ProtocolError("request params must be an object")
        return cls(obj["id"], params)


@dataclass(frozen=True)
class EvalResponse:
    id: int
    failure: bool
    severity: Optional[float] = None
    diagnostics: Optional[str] = None

    def to_line(self) -> str:
        obj: dict = {"id": self.id, "failure": self.failure}
        if self.severity is not None:
            obj["severity"] = self.severity
        if self.diagnostics is not None:
            obj["diagnostics"] = self.diagnostics
        return json.dumps(obj)

    @classmethod
    def from_line(cls, line: str) -> "EvalResponse":
        obj = _load_object(line)
        if not _is_int(obj.get("id")):
            raise ProtocolError("response id must be an integer")
        if not isinstance(obj.get("failure"), bool):
            raise ProtocolError("response failure must be a boolean")
        sev = obj.get("severity")
        if sev is not None and not (_is_number(sev) and math.isfinite(sev)):
            raise ProtocolError("response severity must be a finite number")
        diag = obj.get("diagnostics")
        if diag is not None and not isinstance(diag, str):
            raise ProtocolError("response diagnostics must be a string")
        return cls(obj["id"], obj["failure"], sev, diag)


def _load_object(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed line {line!r}: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError(f"expected a JSON object, got {line!r}")
    return obj


# -- synthetic vision-based-landing oracle -------------------------------------


@dataclass(frozen=True)
class SyntheticVblConfig:
    """Runway detector stand-in: fails beyond a parabolic distance boundary.

    The detector fails iff ``d > d0 - curvature * (alpha - alpha_ref)**2``.
    """

    d0: float = 2.5
    curvature: float = 0.2
    alpha_ref: float = 3.0
    alpha_name: str = "glideslope_deg"
    distance_name: str = "distance_nm"

    def __post_init__(self):
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")

    def boundary(self, alpha):
        return self.d0 - self.curvature * (alpha - self.alpha_ref) ** 2

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticVblConfig":
        known = {k: data[k] for k in ("d0", "curvature", "alpha_ref", "alpha_name", "distance_name") if k in data}
        return cls(**known)

    def to_dict(self) -> dict:
        return {
            "d0": self.d0,
            "curvature": self.curvature,
            "alpha_ref": self.alpha_ref,
            "alpha_name": self.alpha_name,
            "distance_name": self.distance_name,
        }


def synthetic_vbl(point: Union[OddPoint, Mapping], config: SyntheticVblConfig = SyntheticVblConfig()):
    """Return ``(failure, severity)``; severity is the signed distance past the boundary."""
    values = point.values if isinstance(point, OddPoint) else point
    try:
        alpha = float(values[config.alpha_name])
        d = float(values[config.distance_name])
    except KeyError as exc:
        raise SchemaError(f"synthetic oracle needs dimension {exc}") from None
    severity = d - config.boundary(alpha)
    return severity > 0, severity


# -- in-process evaluator registry ---------------------------------------------

Evaluator = Callable[[Mapping], tuple]
_REGISTRY: dict[str, Callable[[Mapping], Evaluator]] = {}


def register_evaluator(name: str, factory: Callable[[Mapping], Evaluator]) -> None:
    """Register ``factory(config) -> evaluator``; an evaluator maps params to (failure, severity)."""
    _REGISTRY[name] = factory


def _synthetic_factory(config: Mapping) -> Evaluator:
    cfg = SyntheticVblConfig.from_dict(config)
    return lambda params: synthetic_vbl(params, cfg)


def _never_fails_factory(config: Mapping) -> Evaluator:
    return lambda params: (False, None)


register_evaluator("synthetic_vbl", _synthetic_factory)
register_evaluator("never_fails", _never_fails_factory)


@dataclass(frozen=True)
class SutDescriptor:
    kind: str = IN_PROCESS
    evaluator: str = "synthetic_vbl"
    evaluator_config: Mapping = field(default_factory=dict)
    command: tuple[str, ...] = ()
    cwd: Optional[str] = None
    timeout_s: float = DEFAULT_TIMEOUT_S

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        if self.kind not in (IN_PROCESS, EXTERNAL_PROCESS):
            raise ValueError(f"unknown SUT kind {self.kind!r}")
        if not self.timeout_s > 0:
            raise ValueError("timeout must be positive")
        if self.kind == EXTERNAL_PROCESS and not self.command:
            raise ValueError("external SUT needs a command")

    @classmethod
    def in_process(cls, evaluator: str = "synthetic_vbl", **config) -> "SutDescriptor":
        return cls(IN_PROCESS, evaluator, dict(config))

    @classmethod
    def external(cls, command: Union[str, Sequence[str]], cwd=None, timeout_s=DEFAULT_TIMEOUT_S):
        cmd = shlex.split(command) if isinstance(command, str) else list(command)
        return cls(EXTERNAL_PROCESS, "", {}, tuple(cmd), cwd, timeout_s)

    def to_dict(self) -> dict:
        if self.kind == IN_PROCESS:
            return {"kind": self.kind, "evaluator": self.evaluator, "config": dict(self.evaluator_config)}
        return {"kind": self.kind, "command": list(self.command), "cwd": self.cwd, "timeout_s": self.timeout_s}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SutDescriptor":
        kind = data.get("kind", IN_PROCESS)
        if kind == IN_PROCESS:
            return cls(IN_PROCESS, data.get("evaluator", "synthetic_vbl"), dict(data.get("config", {})))
        return cls.external(
            data["command"], data.get("cwd"), float(data.get("timeout_s", DEFAULT_TIMEOUT_S))
        )


class ExternalProcess:
    """One child process answering requests line by line."""

    def __init__(self, command: Sequence[str], cwd=None, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.timeout_s = timeout_s
        try:
            self.proc = subprocess.Popen(
                list(command),
                cwd=cwd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise ProcessError(f"cannot start SUT {list(command)}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._stderr_tail: deque = deque(maxlen=20)
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()

    def _pump_stdout(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _pump_stderr(self):
        for line in self.proc.stderr:
            self._stderr_tail.append(line.rstrip())

    def _exit_detail(self) -> str:
        try:
            code = self.proc.wait(timeout=1.0)
        except subprocess.TimeoutExpired:
            code = None
        tail = "; ".join(self._stderr_tail)
        return f"exit status {code}" + (f", stderr: {tail}" if tail else "")

    def request(self, req: EvalRequest) -> EvalResponse:
        try:
            self.proc.stdin.write(req.to_line() + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            raise ProcessError(f"SUT stopped accepting requests ({self._exit_detail()})") from None
        try:
            line = self._lines.get(timeout=self.timeout_s)
        except queue.Empty:
            self.kill()
            raise HarnessTimeoutError(f"no response to request {req.id} within {self.timeout_s} s") from None
        if line is None:
            raise ProcessError(f"SUT exited before answering request {req.id} ({self._exit_detail()})")
        resp = EvalResponse.from_line(line)
        if resp.id != req.id:
            raise ProtocolError(f"response id {resp.id} does not match request id {req.id}")
        return resp

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=self.timeout_s)
            except (OSError, subprocess.TimeoutExpired):
                self.kill()


class SutClient:
    """Evaluation session against one SUT; reuse it across many requests."""

    def __init__(self, sut: SutDescriptor, workers: int = 1):
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        self.sut = sut
        self.workers = workers
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._idle: queue.LifoQueue = queue.LifoQueue()
        self._all: list[ExternalProcess] = []
        self._spawn_lock = threading.Lock()
        self._evaluator: Optional[Evaluator] = None
        if sut.kind == IN_PROCESS:
            try:
                factory = _REGISTRY[sut.evaluator]
            except KeyError:
                raise HarnessError(f"no in-process evaluator named {sut.evaluator!r}") from None
            self._evaluator = factory(sut.evaluator_config)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        for proc in self._all:
            proc.close()
        self._all.clear()

    def _next_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    def _checkout(self) -> ExternalProcess:
        while True:
            try:
                return self._idle.get_nowait()
            except queue.Empty:
                pass
            with self._spawn_lock:
                if len(self._all) < self.workers:
                    proc = ExternalProcess(self.sut.command, self.sut.cwd, self.sut.timeout_s)
                    self._all.append(proc)
                    return proc
            try:
                return self._idle.get(timeout=0.05)
            except queue.Empty:
                continue

    def _discard(self, proc: ExternalProcess) -> None:
        proc.kill()
        with self._spawn_lock:
            if proc in self._all:
                self._all.remove(proc)

    def request(self, params: Mapping) -> EvalResponse:
        req = EvalRequest(self._next_id(), dict(params))
        if self._evaluator is not None:
            failure, severity = self._evaluator(req.params)
            return EvalResponse(req.id, bool(failure), None if severity is None else float(severity))
        proc = self._checkout()
        try:
            resp = proc.request(req)
        except HarnessError:
            self._discard(proc)
            raise
        self._idle.put(proc)
        return resp

    def evaluate(self, point: OddPoint, iteration: int = 1, acquisition: Optional[str] = None) -> Trial:
        resp = self.request(point.values)
        return Trial(point, resp.failure, resp.severity, iteration, acquisition)

    def evaluate_batch(
        self,
        points: Sequence[OddPoint],
        iteration: int = 1,
        acquisitions: Optional[Sequence[Optional[str]]] = None,
    ) -> list[Trial]:
        if not points:
            return []
        tags = list(acquisitions) if acquisitions is not None else [None] * len(points)
        if self.workers == 1 or len(points) == 1:
            done = []
            for p, tag in zip(points, tags):
                try:
                    done.append(self.evaluate(p, iteration, tag))
                except HarnessError as exc:
                    raise BatchError(exc, done) from exc
            return done
        with ThreadPoolExecutor(max_workers=min(self.workers, len(points))) as pool:
            futures = [pool.submit(self.evaluate, p, iteration, tag) for p, tag in zip(points, tags)]
            done = []
            for i, fut in enumerate(futures):
                try:
                    done.append(fut.result())
                except HarnessError as exc:
                    for later in futures[i + 1:]:
                        later.cancel()
                    raise BatchError(exc, done) from exc
            return done


def evaluate(sut: SutDescriptor, point: OddPoint, iteration: int = 1) -> Trial:
    with SutClient(sut) as client:
        return client.evaluate(point, iteration)


def evaluate_batch(sut: SutDescriptor, points: Sequence[OddPoint], workers: int = 1) -> list[Trial]:
    with SutClient(sut, workers) as client:
        return client.evaluate_batch(points)
