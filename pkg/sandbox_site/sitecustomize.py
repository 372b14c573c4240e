"""
Interpreter start-up hook for sandboxed programs.

The sandbox puts this directory first on PYTHONPATH. When
GEODATA_HTTP_FIXTURES names a fixture directory, every requests.Session
created by the generated program answers from those recordings. When
GEODATA_NETWORK is "0", internet sockets refuse to connect.
"""

import os
import socket

_fixtures_dir = os.environ.get("GEODATA_HTTP_FIXTURES")
_network_allowed = os.environ.get("GEODATA_NETWORK", "1") != "0"


def _install_fixtures(fixtures_dir):
    try:
        import requests
    except ImportError:
        return
    from http_fixtures import FixtureAdapter, FixtureStore

    store = FixtureStore(fixtures_dir)
    original_init = requests.Session.__init__

    def patched_init(self, *args, **kwargs):
        original_init(self, *args, **kwargs)
        adapter = FixtureAdapter(store)
        self.mount("http://", adapter)
        self.mount("https://", adapter)

    requests.Session.__init__ = patched_init


def _block_network():
    original_connect = socket.socket.connect
    original_connect_ex = socket.socket.connect_ex

    def refuse(sock):
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            raise OSError("network access is disabled in this sandbox")

    def connect(self, address):
        refuse(self)
        return original_connect(self, address)

    def connect_ex(self, address):
        refuse(self)
        return original_connect_ex(self, address)

    socket.socket.connect = connect
    socket.socket.connect_ex = connect_ex


if _fixtures_dir:
    _install_fixtures(_fixtures_dir)
if not _network_allowed:
    _block_network()
