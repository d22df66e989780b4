#!/usr/bin/python
import asyncio
import logging
import os
import sys
from typing import Any

from agent_utilities.base_utilities import to_boolean
from agent_utilities.mcp_utilities import create_mcp_server, ctx_progress
from dotenv import find_dotenv, load_dotenv
from fastmcp import Context, FastMCP
from fastmcp.utilities.logging import get_logger
from pydantic import Field, ValidationError

from rdmdp import __version__
from rdmdp import field as fld
from rdmdp.exceptions import ConfigError
from rdmdp.harness import forward_solution, run_experiment, simulate_dump, validate_spec
from rdmdp.model import ModelParams, admissibility_report, default_a_n, derive_constants
from rdmdp.rdmdp_models import Response

logger = get_logger(name="mcp_server")
logger.setLevel(logging.DEBUG)

DEFAULT_OUT = os.getenv("RDMDP_OUT", "runs")


def _params(a: float, b: float, lam: float) -> ModelParams:
    try:
        return ModelParams(a=a, b=b, lam=lam)
    except ValidationError as e:
        raise ConfigError(f"invalid rates: {e}") from e


def register_model_tools(mcp: FastMCP):
    @mcp.tool(tags={"model"})
    def model_constants(
        a: float = Field(description="Creation rate on an isolated empty site", default=1.0),
        b: float = Field(description="Annihilation rate", default=1.0),
        lam: float = Field(description="Neighbour-enhanced creation offset lambda", default=0.1),
        d: int = Field(description="Dimension", default=1),
        n: int = Field(description="Side length for the default a_n", default=64),
    ) -> Response:
        """Equilibrium density, compressibility, F', G, kappa and the lambda check."""
        params = _params(a, b, lam)
        dc = derive_constants(params)
        report = admissibility_report(params, float(os.getenv("RDMDP_C0", "1.0")), d)
        return Response(
            response=f"rho* = {dc.rho_star:.12g}",
            data=dc.model_dump() | {"admissibility": report, "default_a_n": default_a_n(n, d)},
        )


def register_simulate_tools(mcp: FastMCP):
    @mcp.tool(tags={"simulate"})
    async def simulate_summary(
        spec: dict[str, Any] = Field(description="Experiment spec fields (JSON object)", default={}),
        tilt: bool = Field(description="Run the tilted dynamics", default=False),
        ctx: Context | None = Field(description="MCP context for progress reporting", default=None),
    ) -> Response:
        """Simulate one trajectory at the smallest side length and return its manifest."""
        await ctx_progress(ctx, 0, 100)
        parsed = validate_spec(spec | {"out": spec.get("out", DEFAULT_OUT)})
        path = await asyncio.to_thread(simulate_dump, parsed, tilt)
        await ctx_progress(ctx, 100, 100)
        return Response(response=str(path), data=path.read_text())


def register_field_tools(mcp: FastMCP):
    @mcp.tool(tags={"field"})
    def solve_pde(
        spec: dict[str, Any] = Field(description="Experiment spec fields (JSON object)", default={}),
        probe_times: int = Field(description="Number of evenly spaced output times", default=5),
    ) -> Response:
        """Solve the forward equation for (phi, H) and return the mass and L^2 norm over time."""
        parsed = validate_spec(spec)
        rho = forward_solution(parsed)
        norms, _ = fld.l2_norm_sq(rho)
        stride = max(1, rho.K // max(1, probe_times - 1))
        rows = [
            {"t": float(rho.times[j]), "mass": float(rho.spectrum[j].flat[0].real), "l2_sq": float(norms[j])}
            for j in range(0, rho.K + 1, stride)
        ]
        return Response(response=repr(rho), data=rows)

    @mcp.tool(tags={"field"})
    def rate_breakdown(
        spec: dict[str, Any] = Field(description="Experiment spec fields (JSON object)", default={}),
    ) -> Response:
        """Q_0, Q_dyn and Q_T of the forward solution for (phi, H)."""
        parsed = validate_spec(spec)
        dc = derive_constants(parsed.model)
        rho = forward_solution(parsed)
        breakdown = fld.rate_function(rho, dc)
        return Response(response=f"Q_T = {breakdown.qT:.12g}", data=breakdown.model_dump())


def register_experiment_tools(mcp: FastMCP):
    @mcp.tool(name="run_experiment", tags={"experiment"})
    async def run_experiment_tool(
        spec: dict[str, Any] = Field(description="Experiment spec including 'kind'"),
        ctx: Context | None = Field(description="MCP context for progress reporting", default=None),
    ) -> Response:
        """Run a named experiment and return its verdict and metrics."""
        await ctx_progress(ctx, 0, 100)
        parsed = validate_spec(spec | {"out": spec.get("out", DEFAULT_OUT)})
        report = await asyncio.to_thread(run_experiment, parsed)
        await ctx_progress(ctx, 100, 100)
        return Response(response=report.verdict, data=report.model_dump(exclude={"rows"}))


def register_prompts(mcp: FastMCP):
    """Register rdmdp prompts."""

    @mcp.prompt(
        name="rdmdp-acceptance",
        description="Run the acceptance suite of the moderate-deviation toolkit",
    )
    def rdmdp_acceptance() -> str:
        return (
            "Run generator-oracle, rate-identity and clt-init first, then martingale-unity, "
            "tilted-hydro and bg-decay on the default n-ladder; report each verdict and "
            "finish with mdp-probe, which is exploratory."
        )


def register_all_tools(mcp: FastMCP) -> list[str]:
    """Register every tool category gated by its environment toggle."""
    registered_tags = []
    tool_mappings = [
        ("MODEL_TOOL", (register_model_tools, "model")),
        ("SIMULATE_TOOL", (register_simulate_tools, "simulate")),
        ("FIELD_TOOL", (register_field_tools, "field")),
        ("EXPERIMENT_TOOL", (register_experiment_tools, "experiment")),
    ]
    for env_key, (register_func, tag) in tool_mappings:
        if to_boolean(os.getenv(env_key, "True")):
            register_func(mcp)
            registered_tags.append(tag)
    return registered_tags


def get_mcp_instance() -> tuple[Any, Any, Any, Any]:
    """Create and return the rdmdp MCP instance."""
    load_dotenv(find_dotenv())

    args, mcp, middlewares = create_mcp_server(
        name="rdmdp",
        version=__version__,
        instructions="Reaction-diffusion moderate-deviation toolkit",
    )

    registered_tags = register_all_tools(mcp)
    register_prompts(mcp)

    for mw in middlewares:
        mcp.add_middleware(mw)

    return mcp, args, middlewares, registered_tags


def mcp_server():
    """Run the rdmdp MCP server."""
    mcp, args, middlewares, registered_tags = get_mcp_instance()

    print(f"rdmdp MCP v{__version__}", file=sys.stderr)
    print("\nStarting MCP Server", file=sys.stderr)
    print(f"  Transport: {args.transport.upper()}", file=sys.stderr)
    print(f"  Dynamic Tags Loaded: {registered_tags}", file=sys.stderr)

    if args.transport == "stdio":
        mcp.run(transport="stdio")
    elif args.transport == "streamable-http":
        mcp.run(transport="streamable-http", host=args.host, port=args.port)
    elif args.transport == "sse":
        mcp.run(transport="sse", host=args.host, port=args.port)
    else:
        logger.error(f"Invalid transport: {args.transport}")
        sys.exit(1)


if __name__ == "__main__":
    mcp_server()
