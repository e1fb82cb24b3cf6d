from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
from starlette.concurrency import run_in_threadpool
from typing import Optional
import logging
import os
import sys
import time

from neurododge import __version__
from neurododge.checkpoint import load_network
from neurododge.deploy import AddressSequence, decode_action, decode_sequence
from neurododge.errors import NeuroDodgeError, ShapeError
from neurododge.events import EventStream, validate_stream, window_to_us
from neurododge.kep import apply_kep
from neurododge.models import InferRequest, InferResponse
from neurododge.snn import Network
from neurododge.sparse import forward_async
from neurododge.train import loss_spec_for_window

# Configure logging
logging.basicConfig(
    level=os.environ.get("NEURODODGE_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[logging.StreamHandler(sys.stdout)]
)
logger = logging.getLogger(__name__)


def request_stream(request: InferRequest, net: Network) -> EventStream:
    """Events or address frames from the request as a stream spanning the network's window"""
    window_us = window_to_us(request.window_ms)
    if window_us != net.T * 1000:
        raise ShapeError(f"Window of {request.window_ms} ms does not match network T={net.T}")
    if request.events is not None:
        return validate_stream(request.events, request.width, request.height, request.window_ms)
    seq = AddressSequence(tuple(request.frames), request.width, request.height, net.T)
    return decode_sequence(seq, window_us)


def run_inference(net: Network, request: InferRequest) -> InferResponse:
    start_time = time.perf_counter()
    stream = request_stream(request, net)
    if request.kep and len(stream):
        stream = apply_kep(stream).key
    record = forward_async(net, stream)
    n_dt = loss_spec_for_window(net.T, net.output_channels).n_dt
    return InferResponse(
        counts=[int(c) for c in record.counts],
        action=decode_action(record.counts, n_dt),
        synaptic_events=record.synaptic_events,
        input_events=len(stream),
        execution_time=round(time.perf_counter() - start_time, 4),
    )


def create_app(network: Optional[Network] = None) -> FastAPI:
    """Build the service; without ``network`` the checkpoint named by NEURODODGE_CHECKPOINT is loaded"""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        """Manage application lifecycle"""
        logger.info("NeuroDodge service starting up...")
        path = os.environ.get("NEURODODGE_CHECKPOINT")
        if app.state.network is None and path:
            app.state.network = load_network(path)
            logger.info(f"Loaded checkpoint {path} (T={app.state.network.T})")
        if app.state.network is None:
            logger.warning("No network loaded; /infer will answer 503")
        yield
        logger.info("NeuroDodge service shutting down...")

    app = FastAPI(
        title="NeuroDodge API",
        description="Spiking-network inference on event streams and AER address sequences",
        version=__version__,
        lifespan=lifespan
    )
    app.state.network = network

    # Configure CORS
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/")
    async def root():
        """Root endpoint with service info"""
        net = app.state.network
        return {
            "service": "NeuroDodge",
            "status": "healthy",
            "version": __version__,
            "network": None if net is None else {
                "T": net.T,
                "layers": [spec.kind.value for spec in net.layers],
                "input_shape": list(net.input_shape),
                "quantized": net.quantized,
            },
        }

    @app.get("/health")
    async def health():
        """Health check endpoint"""
        return {"status": "healthy"}

    @app.post("/infer", response_model=InferResponse)
    async def infer(request: InferRequest):
        """Run the network on raw events or an address sequence and decode the dodge action"""
        net = app.state.network
        if net is None:
            raise HTTPException(status_code=503, detail="No network loaded")
        n = len(request.events) if request.events is not None else sum(len(a) for _, a in request.frames)
        logger.info(f"Received inference request ({n} inputs)")
        response = await run_in_threadpool(run_inference, net, request)
        logger.info(f"Inference completed: counts={response.counts}, time={response.execution_time:.3f}s")
        return response

    @app.exception_handler(NeuroDodgeError)
    async def domain_exception_handler(request: Request, exc: NeuroDodgeError):
        """Invalid events, shapes or formats"""
        logger.warning(f"Rejected request: {exc}")
        return JSONResponse(
            status_code=422,
            content={"error": str(exc)}
        )

    @app.exception_handler(HTTPException)
    async def http_exception_handler(request: Request, exc: HTTPException):
        """Handle HTTP exceptions"""
        return JSONResponse(
            status_code=exc.status_code,
            content={"error": exc.detail}
        )

    @app.exception_handler(Exception)
    async def general_exception_handler(request: Request, exc: Exception):
        """Handle unexpected exceptions"""
        logger.error(f"Unhandled exception: {str(exc)}")
        return JSONResponse(
            status_code=500,
            content={"error": "Internal server error"}
        )

    return app


app = create_app()
