"""
SMW1 weights file layout.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from ctypes import LittleEndianStructure, c_char, c_uint32, sizeof

# Little-endian throughout:
#   magic "SMW1"
#   per layer: u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim], float32 payload
#   u32 CRC-32 of every preceding byte

# pylint: disable=too-few-public-methods

SMW_MAGIC = b"SMW1"


class smw_magic(LittleEndianStructure):
    _pack_ = 1
    _fields_ = [
        ("magic", c_char * 4),
    ]


class smw_record_name(LittleEndianStructure):
    _pack_ = 1
    _fields_ = [
        ("name_len", c_uint32),
    ]


class smw_record_shape(LittleEndianStructure):
    _pack_ = 1
    _fields_ = [
        ("ndim", c_uint32),
    ]


class smw_trailer(LittleEndianStructure):
    _pack_ = 1
    _fields_ = [
        ("crc32", c_uint32),
    ]


SMW_DIM = sizeof(c_uint32)
SMW_MIN_SIZE = sizeof(smw_magic) + sizeof(smw_trailer)
