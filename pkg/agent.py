"""
Geodata Retrieval Agent

Runs the retrieval workflow for one natural-language data request:

    1. ask the LLM to pick a data source from the registry index
    2. load that source's handbook and ask for a download program
    3. inject secrets and execute the program in the sandbox
    4. on failure, send the program and its error back for correction,
       up to max_debug_iterations times
    5. check the produced files against the requested format

Usage:
    python agent.py fetch --request "Download all province boundaries of Cuba" \
        --out cuba_provinces.geojson --format geojson

Exit codes: 0 success, 2 selection failed, 3 debug attempts exhausted,
4 verification failed, 1 configuration error.
"""

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import pandas as pd
from shapely.errors import ShapelyError
from shapely.geometry import shape

import config
from errors import (
    ConfigurationError,
    GeoDataError,
    LlmError,
    MissingEntryFunction,
    MissingSecret,
    NoCodeBlock,
    RateLimited,
    SelectionUnparsable,
    UnparsableReply,
)
from llm_client import ModelConfig, make_client
from prompting import (
    GeneratedProgram,
    build_debug_prompt,
    build_fetch_prompt,
    build_selection_prompt,
    extract_program,
    parse_selection_reply,
)
from registry import (
    DEFAULT_RUNTIME,
    UNKNOWN,
    SecretRedactingFilter,
    SecretStore,
    load_registry,
    render_index,
    resolve_handbook,
)
from sandbox import ExecutionResult, RuntimeConfig, execute, inject_secrets, work_directory

logger = logging.getLogger(__name__)

FORMATS = ("geojson", "csv", "image", "other")
STATUSES = ("success", "selection_failed", "exhausted_debug", "verification_failed")
EXIT_CODES = {"success": 0, "selection_failed": 2, "exhausted_debug": 3, "verification_failed": 4}
NO_CODE_BLOCK = "reply contained no code block"
MAX_RATE_LIMIT_WAIT = 60.0

IMAGE_MAGIC = (
    b"\x89PNG\r\n\x1a\n",
    b"\xff\xd8\xff",
    b"GIF87a",
    b"GIF89a",
    b"II*\x00",
    b"MM\x00*",
)


@dataclass(frozen=True)
class DataRequest:
    text: str
    output_path: str
    declared_format: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ConfigurationError("the data request text is empty")
        if not self.output_path:
            raise ConfigurationError("the output path is empty")
        if self.declared_format is not None and self.declared_format not in FORMATS:
            raise ConfigurationError(f"unknown format {self.declared_format!r}")

    def prompt_text(self):
        """The request as shown to the LLM, carrying the save location."""
        if self.output_path in self.text:
            return self.text
        return f"1. {self.text}\n2. Save the downloaded data at: {self.output_path}"

    def to_dict(self):
        return {"text": self.text, "output_path": self.output_path,
                "declared_format": self.declared_format}


@dataclass(frozen=True)
class AgentConfig:
    max_debug_iterations: int = config.MAX_DEBUG_ITERATIONS
    selection_retries: int = config.SELECTION_RETRIES
    error_report_cap: int = config.ERROR_REPORT_CAP

    def __post_init__(self):
        if self.max_debug_iterations < 0 or self.selection_retries < 0:
            raise ConfigurationError("iteration limits must be non-negative")


@dataclass(frozen=True)
class AttemptRecord:
    index: int
    program: GeneratedProgram
    result: ExecutionResult
    prompt_kind: str
    error_report: Optional[str] = None

    def __post_init__(self):
        expected = "fetch" if self.index == 1 else "debug"
        if self.prompt_kind != expected:
            raise ValueError(f"attempt {self.index} must come from a {expected} prompt")

    def to_dict(self):
        return {
            "index": self.index,
            "prompt_kind": self.prompt_kind,
            "program": self.program.source_text,
            "extracted": self.program.extracted,
            "result": self.result.to_dict(),
            "error_report": self.error_report,
        }


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reason: str = ""

    @classmethod
    def ok(cls):
        return cls(True)

    @classmethod
    def fail(cls, reason):
        return cls(False, reason)


@dataclass
class SessionReport:
    request: DataRequest
    selected_source: str = UNKNOWN
    attempts: list = field(default_factory=list)
    status: str = "selection_failed"
    output_files: list = field(default_factory=list)
    total_duration: float = 0.0
    verification: Optional[Verdict] = None
    selection_explanation: str = ""

    def to_dict(self):
        return {
            "request": self.request.to_dict(),
            "selected_source": self.selected_source,
            "selection_explanation": self.selection_explanation,
            "status": self.status,
            "attempts": [a.to_dict() for a in self.attempts],
            "output_files": list(self.output_files),
            "verification": None if self.verification is None else
            {"passed": self.verification.passed, "reason": self.verification.reason},
            "total_duration": round(self.total_duration, 3),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


# --- selection ------------------------------------------------------------------

def select_source(request, reg, llm, cfg=None, explanation=None):
    """
    Ask the LLM for a data source.

    The parsed name is returned verbatim; callers map it to an alias. When
    `explanation` is a list the reply's explanation is appended to it.
    """
    cfg = cfg or AgentConfig()
    prompt = build_selection_prompt(request.text, render_index(reg))
    for attempt in range(cfg.selection_retries + 1):
        reply = llm.complete(prompt)
        try:
            selection = parse_selection_reply(reply)
        except UnparsableReply as exc:
            logger.warning("Selection reply %d unparsable: %s", attempt + 1, exc)
            continue
        if explanation is not None:
            explanation.append(selection.explanation)
        logger.info("LLM selected data source %r", selection.selected)
        return selection.selected
    raise SelectionUnparsable(f"no parsable selection after {cfg.selection_retries + 1} replies")


# --- verification ---------------------------------------------------------------

def _coordinates_valid(geometry):
    geom = shape(geometry)
    if geom.is_empty:
        return True
    minx, miny, maxx, maxy = geom.bounds
    if not all(math.isfinite(v) for v in (minx, miny, maxx, maxy)):
        return False
    return -180 <= minx <= maxx <= 180 and -90 <= miny <= maxy <= 90


def _geometries(document):
    kind = document.get("type")
    if kind == "FeatureCollection":
        for feature in document.get("features", []):
            yield feature.get("geometry")
    elif kind == "Feature":
        yield document.get("geometry")
    elif kind == "GeometryCollection":
        yield from document.get("geometries", [])
    elif kind:
        yield document
    else:
        raise ValueError("no GeoJSON type member")


def check_geojson(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
        for geometry in _geometries(document):
            if geometry is not None and not _coordinates_valid(geometry):
                return Verdict.fail(f"format: invalid coordinates in {path}")
    except (ValueError, TypeError, KeyError, AttributeError, UnicodeDecodeError, ShapelyError) as exc:
        return Verdict.fail(f"format: {path} is not valid GeoJSON ({exc.__class__.__name__})")
    return Verdict.ok()


def check_csv(path):
    try:
        frame = pd.read_csv(path, nrows=100)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        return Verdict.fail(f"format: {path} is not a readable CSV ({exc.__class__.__name__})")
    if len(frame.columns) == 0:
        return Verdict.fail(f"format: {path} has no header row")
    return Verdict.ok()


def check_image(path):
    with open(path, "rb") as f:
        head = f.read(16)
    if head.startswith(IMAGE_MAGIC) or (head[:4] == b"RIFF" and head[8:12] == b"WEBP"):
        return Verdict.ok()
    return Verdict.fail(f"format: {path} is not a known raster image")


FORMAT_CHECKS = {"geojson": check_geojson, "csv": check_csv, "image": check_image}


def verify_output(produced_files, request):
    """
    Check the files a successful program left behind.

    Args:
        produced_files: (path, size) pairs reported by the sandbox
        request: the DataRequest naming the output path and format

    Returns:
        Verdict: pass, or fail with a reason
    """
    if not produced_files:
        return Verdict.fail("no files produced")
    target = os.path.abspath(request.output_path)
    if os.path.isdir(target):
        candidates = [p for p, _ in produced_files if os.path.abspath(p).startswith(target + os.sep)]
        if not candidates:
            return Verdict.fail(f"no files produced under {request.output_path}")
    elif os.path.isfile(target):
        if target not in {os.path.abspath(p) for p, _ in produced_files}:
            return Verdict.fail(f"{request.output_path} was not written by this run")
        candidates = [target]
    else:
        return Verdict.fail(f"output not found at {request.output_path}")

    for path in candidates:
        if os.path.getsize(path) == 0:
            return Verdict.fail(f"empty output: {path}")

    check = FORMAT_CHECKS.get(request.declared_format)
    if check is None:
        return Verdict.ok()
    # a directory passes when any file has the declared format (sidecars are allowed)
    verdicts = [check(path) for path in candidates]
    passing = [v for v in verdicts if v.passed]
    return passing[0] if passing else verdicts[0]


# --- session --------------------------------------------------------------------

def make_error_report(result, cap=config.ERROR_REPORT_CAP):
    """stderr (stdout when stderr is empty), keeping the tail within cap bytes."""
    text = result.stderr if result.stderr.strip() else result.stdout
    if result.timed_out:
        text = f"Execution timed out after {result.duration:.0f} seconds.\n{text}"
    if not text.strip():
        text = f"The program exited with code {result.exit_code} without any output."
    data = text.encode("utf-8")
    if len(data) > cap:
        text = data[-cap:].decode("utf-8", errors="ignore")
    return text


def _failed_result(message):
    return ExecutionResult(succeeded=False, exit_code=-1, stdout="", stderr=message, duration=0.0)


def _redacted(result, store):
    if store is None:
        return result
    return replace(result, stdout=store.redact(result.stdout), stderr=store.redact(result.stderr))


def _runtime_for(handbook, sandbox_cfg):
    if handbook.runtime_id in config.RUNTIMES and handbook.runtime_id != DEFAULT_RUNTIME:
        command, extension = config.RUNTIMES[handbook.runtime_id]
        return replace(sandbox_cfg, interpreter_command=tuple(command), extension=extension)
    return sandbox_cfg


def _generate(llm, prompt, contract):
    """One LLM round trip; failures come back as an unextracted program plus a message."""
    reply = ""
    try:
        reply = llm.complete(prompt)
        return extract_program(reply, contract), None
    except NoCodeBlock:
        return GeneratedProgram.unextracted(reply, contract.entry_function), NO_CODE_BLOCK
    except MissingEntryFunction as exc:
        return GeneratedProgram.unextracted(reply, contract.entry_function), str(exc)
    except RateLimited as exc:
        if exc.retry_after and exc.retry_after <= MAX_RATE_LIMIT_WAIT:
            time.sleep(exc.retry_after)
        return GeneratedProgram.unextracted(reply, contract.entry_function), str(exc)
    except LlmError as exc:
        return GeneratedProgram.unextracted(reply, contract.entry_function), str(exc)


def run_session(request, reg, llm, sandbox_cfg, cfg=None, store=None):
    """
    Run one request through selection, generation, execution and debugging.

    Every workflow failure is encoded in the report status. Sandbox setup
    errors (missing interpreter, unwritable directories) propagate.
    """
    cfg = cfg or AgentConfig()
    started = time.monotonic()
    report = SessionReport(request)

    explanation = []
    try:
        selected = select_source(request, reg, llm, cfg, explanation)
    except (SelectionUnparsable, LlmError) as exc:
        logger.warning("Source selection failed: %s", exc)
        report.total_duration = time.monotonic() - started
        return report
    report.selected_source = selected
    report.selection_explanation = explanation[0] if explanation else ""
    alias = None if selected == UNKNOWN else reg.lookup(selected)
    if alias is None:
        logger.warning("No usable data source for this request (reply named %r)", selected)
        report.total_duration = time.monotonic() - started
        return report
    report.selected_source = alias

    handbook = resolve_handbook(reg, alias)
    contract = handbook.reply_contract
    runtime = _runtime_for(handbook, sandbox_cfg)
    request_text = request.prompt_text()

    previous, error_report = None, None
    for index in range(1, cfg.max_debug_iterations + 2):
        if index == 1:
            kind, prompt = "fetch", build_fetch_prompt(request_text, alias, handbook)
        else:
            kind, prompt = "debug", build_debug_prompt(request_text, handbook, previous, error_report)
        logger.info("Attempt %d (%s prompt)", index, kind)
        program, failure = _generate(llm, prompt, contract)
        if failure is None:
            try:
                result = execute(inject_secrets(program, store or SecretStore()), runtime, index)
            except MissingSecret as exc:
                result = _failed_result(str(exc))
        else:
            result = _failed_result(failure)
        result = _redacted(result, store)
        report.attempts.append(AttemptRecord(index, program, result, kind, error_report))
        if result.succeeded:
            break
        previous, error_report = program, make_error_report(result, cfg.error_report_cap)
        if store is not None:
            error_report = store.redact(error_report)

    last = report.attempts[-1].result
    if not last.succeeded:
        report.status = "exhausted_debug"
    else:
        report.output_files = [path for path, _ in last.produced_files]
        report.verification = verify_output(last.produced_files, request)
        report.status = "success" if report.verification.passed else "verification_failed"
    report.total_duration = time.monotonic() - started
    logger.info("Session finished: %s after %d attempt(s)", report.status, len(report.attempts))
    return report


# --- command line -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(description="Retrieve geospatial data with an LLM agent")
    subparsers = parser.add_subparsers(dest="command", required=True)
    fetch = subparsers.add_parser("fetch", help="run one data request")
    fetch.add_argument("--request", required=True, help="natural-language data request")
    fetch.add_argument("--out", required=True, help="file or directory the data should land in")
    fetch.add_argument("--registry", default=config.REGISTRY_DIR, help="data source registry directory")
    fetch.add_argument("--endpoint", default=config.LLM_ENDPOINT, help="chat-completion endpoint URL")
    fetch.add_argument("--model", default=config.LLM_MODEL, help="model name")
    fetch.add_argument("--max-debug", type=int, default=config.MAX_DEBUG_ITERATIONS,
                       help="debug iterations after the first attempt")
    fetch.add_argument("--timeout", type=float, default=config.EXECUTION_TIMEOUT,
                       help="per-execution timeout in seconds")
    fetch.add_argument("--transport", choices=("live", "record", "replay"), default="live")
    fetch.add_argument("--cassette", help="cassette file for record/replay")
    fetch.add_argument("--http-fixtures", help="replay HTTP traffic of generated programs from this directory")
    fetch.add_argument("--format", choices=("geojson", "csv", "image"), help="expected output format")
    fetch.add_argument("--dry-run", action="store_true", help="print the prompts, execute nothing")
    fetch.add_argument("--report", help="write the session report (JSON) to this file")
    fetch.add_argument("--secrets", default=config.SECRETS_FILE or None, help="secrets file")
    fetch.add_argument("--workdir", help="keep generated programs in this directory")
    fetch.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def setup_logging(verbose, store):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    redacting = SecretRedactingFilter(store)
    for handler in logging.getLogger().handlers:
        handler.addFilter(redacting)


def _output_dir(out):
    if os.path.isdir(out) or out.endswith(("/", os.sep)):
        return out
    return os.path.dirname(out) or "."


def dry_run(request, reg, llm, cfg):
    print(build_selection_prompt(request.text, render_index(reg)).full_text)
    selected = select_source(request, reg, llm, cfg)
    alias = None if selected == UNKNOWN else reg.lookup(selected)
    if alias is None:
        print(f"No usable data source selected ({selected!r}).")
        return EXIT_CODES["selection_failed"]
    print(build_fetch_prompt(request.prompt_text(), alias, resolve_handbook(reg, alias)).full_text)
    return 0


def fetch_command(args):
    try:
        store = SecretStore.from_sources(args.secrets)
    except (OSError, GeoDataError) as exc:
        print(f"error: cannot read secrets: {exc}", file=sys.stderr)
        return 1
    setup_logging(args.verbose, store)
    try:
        reg = load_registry(args.registry)
        model_cfg = ModelConfig(endpoint=args.endpoint, model_name=args.model,
                                transport=args.transport, cassette_path=args.cassette)
        cfg = AgentConfig(max_debug_iterations=args.max_debug)
        out = os.path.abspath(args.out)
        request = DataRequest(args.request, out, args.format)
        llm = make_client(model_cfg)
        if args.dry_run:
            return dry_run(request, reg, llm, cfg)
        output_dir = _output_dir(out)
        with work_directory(args.workdir) as workdir:
            runtime = RuntimeConfig.for_runtime(
                DEFAULT_RUNTIME, workdir, output_dir,
                timeout=args.timeout, env=store.environment(),
                network_allowed=not args.http_fixtures, http_fixtures=args.http_fixtures,
            )
            report = run_session(request, reg, llm, runtime, cfg, store)
    except GeoDataError as exc:
        print(f"error: {store.redact(str(exc))}", file=sys.stderr)
        return 1

    print(f"Data source: {report.selected_source}")
    print(f"Attempts: {len(report.attempts)}")
    for path in report.output_files:
        print(f"  {path}")
    if report.verification is not None and not report.verification.passed:
        print(f"Verification: {report.verification.reason}")
    print(f"Status: {report.status} ({report.total_duration:.1f}s)")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.to_json())
    return EXIT_CODES[report.status]


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "fetch":
        return fetch_command(args)
    return 1


if __name__ == "__main__":
    sys.exit(main())
