"""The trusted manager: partitions, validated transfers and round-robin launches."""

from .client import Client, ManagerError
from .core import DispatchRecord, Manager, ManagerConfig, SymbolEntry, SymbolTable
from .protocol import MsgType, Status
from .server import BackgroundServer, Server, serve

__all__ = [
    "BackgroundServer", "Client", "DispatchRecord", "Manager", "ManagerConfig", "ManagerError",
    "MsgType", "Server", "Status", "SymbolEntry", "SymbolTable", "serve",
]
