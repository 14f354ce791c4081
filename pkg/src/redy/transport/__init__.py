"""Batched queue-pair transport with simulated and socket backends."""
from .netmodel import NetworkModel, simulate_cost
from .ring import RingBuffer
from .sim import SimFabric, SimQueuePair, Simulator
from .wire import Op, Request, RequestBatch, Response, ResponseBatch, Status

__all__ = ["NetworkModel", "simulate_cost", "RingBuffer", "SimFabric", "SimQueuePair", "Simulator",
           "Op", "Request", "RequestBatch", "Response", "ResponseBatch", "Status"]
