"""
SMD1 descriptor file layout.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from ctypes import LittleEndianStructure, c_char, c_uint32, sizeof

# Little-endian: magic "SMD1", u32 count, u32 dim, then count * dim float32
# stored row after row.

# pylint: disable=too-few-public-methods

SMD_MAGIC = b"SMD1"


class smd_header(LittleEndianStructure):
    _pack_ = 1
    _fields_ = [
        ("magic", c_char * 4),
        ("count", c_uint32),
        ("dim", c_uint32),
    ]


SMD_HEADER_SIZE = sizeof(smd_header)
SMD_VALUE_DTYPE = "<f4"
