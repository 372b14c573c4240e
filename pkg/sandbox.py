"""
Execution of generated programs in a separate interpreter process.

Secrets are substituted into the program text just before execution, the
program is written to <working_dir>/generated_step_<attempt><ext> and run with
a controlled environment. Output streams go to capture files next to the
program and are read back capped. The process group is killed when the
wall-clock timeout expires.
"""

import contextlib
import logging
import os
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import config
from errors import ConfigurationError, InterpreterMissing, SandboxSetupError
from registry import PLACEHOLDER_RE, resolve_secret

logger = logging.getLogger(__name__)

TRUNCATION_MARKER = "[... {count} bytes truncated ...]\n"


@dataclass(frozen=True)
class RuntimeConfig:
    interpreter_command: tuple
    working_dir: str
    output_dir: str
    timeout: float = config.EXECUTION_TIMEOUT
    env: dict = field(default_factory=dict)
    network_allowed: bool = True
    extension: str = ".py"
    http_fixtures: Optional[str] = None
    stream_cap: int = config.STREAM_CAP_BYTES

    def __post_init__(self):
        object.__setattr__(self, "interpreter_command", tuple(self.interpreter_command))
        if not self.interpreter_command:
            raise ConfigurationError("empty interpreter command")
        if self.timeout <= 0:
            raise ConfigurationError("timeout must be positive")
        if self.stream_cap <= 0:
            raise ConfigurationError("stream cap must be positive")

    @classmethod
    def for_runtime(cls, runtime_id, working_dir, output_dir, **kwargs):
        try:
            command, extension = config.RUNTIMES[runtime_id]
        except KeyError:
            raise InterpreterMissing(f"no interpreter configured for runtime {runtime_id!r}") from None
        return cls(tuple(command), working_dir, output_dir, extension=extension, **kwargs)


@dataclass(frozen=True)
class ExecutionResult:
    succeeded: bool
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    produced_files: tuple = ()
    timed_out: bool = False
    program_path: Optional[str] = None

    def __post_init__(self):
        if self.timed_out and self.succeeded:
            raise ValueError("a timed-out execution cannot succeed")

    def to_dict(self):
        return {
            "succeeded": self.succeeded,
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "duration": round(self.duration, 3),
            "produced_files": [{"path": p, "size": s} for p, s in self.produced_files],
            "timed_out": self.timed_out,
        }


def inject_secrets(program, store):
    """Replace every {{KEY:alias:key}} token with its secret; other bytes are untouched."""
    if not PLACEHOLDER_RE.search(program.source_text):
        return program
    source = PLACEHOLDER_RE.sub(lambda m: resolve_secret(store, m.group(0)), program.source_text)
    return replace(program, source_text=source)


@contextlib.contextmanager
def work_directory(path=None):
    """Yield path, or a temporary directory that is removed with the injected programs in it."""
    if path:
        yield os.path.abspath(path)
        return
    with tempfile.TemporaryDirectory(prefix="geodata_") as tmp:
        yield tmp


def _snapshot(root):
    state = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            path = os.path.join(dirpath, name)
            try:
                st = os.stat(path)
            except OSError:
                continue
            state[os.path.abspath(path)] = (st.st_mtime_ns, st.st_size)
    return state


def _read_capped(path, cap):
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        if size <= cap:
            data, prefix = f.read(), ""
        else:
            # keep the tail: tracebacks end with the salient line
            f.seek(size - cap)
            data, prefix = f.read(), TRUNCATION_MARKER.format(count=size - cap)
            logger.warning("Captured stream %s truncated to its last %d bytes", path, cap)
    return prefix + data.decode("utf-8", errors="replace")


def _resolve_interpreter(command):
    executable = command[0]
    if os.path.isabs(executable):
        if not os.access(executable, os.X_OK):
            raise InterpreterMissing(f"interpreter not executable: {executable}")
        return list(command)
    found = shutil.which(executable)
    if not found:
        raise InterpreterMissing(f"interpreter not found on PATH: {executable}")
    return [found, *command[1:]]


def build_environment(runtime):
    env = {k: os.environ[k] for k in config.ENV_PASSTHROUGH if k in os.environ}
    env.update(runtime.env)
    env["PYTHONPATH"] = os.pathsep.join([config.SANDBOX_SITE_DIR, config.BASE_DIR])
    env["PYTHONIOENCODING"] = "utf-8"
    env["PYTHONDONTWRITEBYTECODE"] = "1"
    env["GEODATA_NETWORK"] = "1" if runtime.network_allowed else "0"
    if runtime.http_fixtures:
        env["GEODATA_HTTP_FIXTURES"] = os.path.abspath(runtime.http_fixtures)
    return env


def _kill(process):
    try:
        if hasattr(os, "killpg"):
            os.killpg(process.pid, signal.SIGKILL)
        else:
            process.kill()
    except (ProcessLookupError, PermissionError):
        pass


def execute(program, runtime, attempt=1):
    """
    Run an injected program and report what happened.

    Args:
        program: GeneratedProgram with no placeholder tokens left
        runtime: RuntimeConfig for the interpreter and directories
        attempt: attempt ordinal, used in the program file name

    Returns:
        ExecutionResult: a non-zero exit is a failed result, not an exception

    Raises:
        InterpreterMissing: the interpreter command cannot be found
        SandboxSetupError: the working or output directory is unusable
    """
    try:
        os.makedirs(runtime.working_dir, exist_ok=True)
        os.makedirs(runtime.output_dir, exist_ok=True)
        filename = f"generated_step_{attempt}{runtime.extension}"
        program_path = os.path.join(runtime.working_dir, filename)
        stdout_path = os.path.join(runtime.working_dir, f"generated_step_{attempt}.stdout")
        stderr_path = os.path.join(runtime.working_dir, f"generated_step_{attempt}.stderr")
        with open(program_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(program.source_text + "\n")
    except OSError as exc:
        raise SandboxSetupError(f"cannot prepare sandbox directories: {exc}") from exc

    command = _resolve_interpreter(runtime.interpreter_command) + [filename]
    own_files = {os.path.abspath(p) for p in (program_path, stdout_path, stderr_path)}
    before = _snapshot(runtime.output_dir)

    logger.info("Executing %s (timeout %.0fs)", program_path, runtime.timeout)
    started = time.monotonic()
    timed_out = False
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        try:
            process = subprocess.Popen(command, cwd=runtime.working_dir, env=build_environment(runtime),
                                       stdin=subprocess.DEVNULL, stdout=out, stderr=err,
                                       start_new_session=True)
        except FileNotFoundError as exc:
            raise InterpreterMissing(str(exc)) from exc
        try:
            exit_code = process.wait(timeout=runtime.timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill(process)
            try:
                exit_code = process.wait(timeout=config.KILL_GRACE_SECONDS)
            except subprocess.TimeoutExpired:
                exit_code = -9
    duration = time.monotonic() - started

    after = _snapshot(runtime.output_dir)
    produced = tuple(
        (path, after[path][1])
        for path in sorted(after)
        if path not in own_files and before.get(path) != after[path]
    )
    result = ExecutionResult(
        succeeded=exit_code == 0 and not timed_out,
        exit_code=exit_code,
        stdout=_read_capped(stdout_path, runtime.stream_cap),
        stderr=_read_capped(stderr_path, runtime.stream_cap),
        duration=duration,
        produced_files=produced,
        timed_out=timed_out,
        program_path=program_path,
    )
    logger.info("Attempt %d finished: exit %s in %.1fs, %d file(s) produced%s", attempt, exit_code,
                duration, len(produced), " (timed out)" if timed_out else "")
    return result
