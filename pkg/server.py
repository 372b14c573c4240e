"""
Geodata Retrieval Server

A Flask backend exposing the data source registry and the retrieval agent over
HTTP, so other programs or agents can browse sources, preview prompts and run
retrieval sessions.

Key Features:
- Data source index and per-source technical handbooks
- Selection and fetch prompt previews
- Full retrieval sessions returning the session report as JSON
"""

import logging
import os

from flask import Flask, jsonify, request
from flask_cors import CORS

import config
from agent import EXIT_CODES, AgentConfig, DataRequest, run_session, setup_logging
from errors import ConfigurationError, GeoDataError, PromptError, UnknownAlias
from llm_client import ModelConfig, make_client
from prompting import build_fetch_prompt, build_selection_prompt
from registry import DEFAULT_RUNTIME, SecretStore, load_registry, render_index, resolve_handbook
from sandbox import RuntimeConfig, work_directory

logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app)  # Enable cross-origin requests for browser front ends

# The registry is loaded once at start-up and shared read-only by all requests
registry = load_registry(config.REGISTRY_DIR)
secrets = SecretStore.from_sources(config.SECRETS_FILE or None)


def _error(message, status=400):
    return jsonify({"error": secrets.redact(str(message))}), status


@app.route('/sources')
def get_sources():
    """
    List the registered data sources.

    Returns:
        JSON: {
            "index": str,  # numbered index as shown to the LLM
            "sources": [{"alias": str, "display_name": str, "description": str}]
        }
    """
    return jsonify({
        "index": render_index(registry),
        "sources": [registry.entries[alias].to_dict() for alias in registry.order],
    })


@app.route('/handbook/<alias>')
def get_handbook(alias):
    """Technical handbook of one source (guidelines, template, reply contract)."""
    try:
        return jsonify(resolve_handbook(registry, alias).to_dict())
    except UnknownAlias as exc:
        return _error(exc, 404)


@app.route('/prompts', methods=['POST'])
def preview_prompts():
    """
    Render prompts without calling the LLM.

    Request JSON:
        request (str): the data request
        output_path (str, optional): save location folded into the fetch prompt
        source (str, optional): alias or display name; adds the fetch prompt

    Returns:
        JSON: {"selection": str, "fetch": str (only when source is given)}
    """
    body = request.get_json(silent=True) or {}
    text = body.get("request", "")
    try:
        result = {"selection": build_selection_prompt(text, render_index(registry)).full_text}
        source = body.get("source")
        if source:
            alias = registry.lookup(source)
            if alias is None:
                return _error(f"unknown data source {source!r}", 404)
            data_request = DataRequest(text, body.get("output_path") or "downloaded_data")
            result["fetch"] = build_fetch_prompt(data_request.prompt_text(), alias,
                                                 resolve_handbook(registry, alias)).full_text
    except (PromptError, ConfigurationError) as exc:
        return _error(exc)
    return jsonify(result)


@app.route('/fetch', methods=['POST'])
def fetch_data():
    """
    Run one retrieval session.

    Request JSON:
        request (str), output_path (str): required
        format (str, optional): geojson | csv | image
        transport (str, optional): live | record | replay (default live)
        cassette (str, optional): cassette file for record/replay
        http_fixtures (str, optional): fixture directory for generated programs
        max_debug (int, optional), timeout (float, optional)

    Returns:
        JSON: the session report; "exit_code" mirrors the CLI
    """
    body = request.get_json(silent=True) or {}
    try:
        out = body.get("output_path") or ""
        data_request = DataRequest(body.get("request", ""), os.path.abspath(out) if out else "",
                                   body.get("format"))
        model_cfg = ModelConfig(transport=body.get("transport", "live"), cassette_path=body.get("cassette"))
        cfg = AgentConfig(max_debug_iterations=int(body.get("max_debug", config.MAX_DEBUG_ITERATIONS)))
        fixtures = body.get("http_fixtures")
        timeout = float(body.get("timeout", config.EXECUTION_TIMEOUT))
        llm = make_client(model_cfg)
        with work_directory() as workdir:
            runtime = RuntimeConfig.for_runtime(
                DEFAULT_RUNTIME, workdir, os.path.dirname(data_request.output_path),
                timeout=timeout, env=secrets.environment(),
                network_allowed=not fixtures, http_fixtures=fixtures,
            )
            report = run_session(data_request, registry, llm, runtime, cfg, secrets)
    except (GeoDataError, ValueError) as exc:
        return _error(exc)

    payload = report.to_dict()
    payload["exit_code"] = EXIT_CODES[report.status]
    return jsonify(payload)


def main():
    setup_logging(False, secrets)
    app.run(debug=True, port=5000)


if __name__ == '__main__':
    main()
