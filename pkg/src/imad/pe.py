"""Minimal PE (portable executable) parser for static feature extraction.

Parses just enough of the format for the feature pipeline: the COFF and
optional headers (PE32 and PE32+), the section table with raw data slices for
entropy, and the import directory (DLL names plus imported function names or
ordinals).  Anything malformed raises ``PEFormatError`` naming the failing
structure and the file offset where parsing stopped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DOS_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\x00\x00"
OPTIONAL_MAGIC_PE32 = 0x10B
OPTIONAL_MAGIC_PE32_PLUS = 0x20B


class PEFormatError(ValueError):
    """Structured parse failure: which structure broke and at what offset."""

    def __init__(self, structure, offset, message):
        self.structure = structure
        self.offset = offset
        super().__init__(f"{structure} at offset {offset:#x}: {message}")


@dataclass
class Section:
    name: str
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int
    data: bytes = b""


@dataclass
class ParsedPE:
    machine: int = 0
    header_fields: dict[str, float] = field(default_factory=dict)
    sections: list[Section] = field(default_factory=list)
    imports: list[tuple[str, str]] = field(default_factory=list)  # (dll, symbol)
    is_pe32_plus: bool = False


def shannon_entropy(data: bytes) -> float:
    """Byte-level Shannon entropy in bits per byte (0 for empty input)."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    probs = counts[counts > 0] / len(data)
    return float(-(probs * np.log2(probs)).sum())


class _Cursor:
    def __init__(self, data):
        self.data = data

    def bytes_at(self, offset, count, structure):
        if offset < 0 or offset + count > len(self.data):
            raise PEFormatError(structure, max(offset, 0), "runs past end of file")
        return self.data[offset : offset + count]

    def unpack(self, fmt, offset, structure):
        return struct.unpack_from(fmt, self.bytes_at(offset, struct.calcsize(fmt), structure))

    def cstring(self, offset, structure, limit=4096):
        end = self.data.find(b"\x00", offset, offset + limit)
        if offset >= len(self.data) or end < 0:
            raise PEFormatError(structure, offset, "unterminated name string")
        try:
            return self.data[offset:end].decode("ascii")
        except UnicodeDecodeError:
            raise PEFormatError(structure, offset, "non-ASCII name string") from None


# optional-header layouts after the 2-byte magic: (field, format) in file order
_OPT_COMMON_HEAD = [
    ("MajorLinkerVersion", "<B"),
    ("MinorLinkerVersion", "<B"),
    ("SizeOfCode", "<I"),
    ("SizeOfInitializedData", "<I"),
    ("SizeOfUninitializedData", "<I"),
    ("AddressOfEntryPoint", "<I"),
    ("BaseOfCode", "<I"),
]
_OPT_TAIL = [
    ("SectionAlignment", "<I"),
    ("FileAlignment", "<I"),
    ("MajorOperatingSystemVersion", "<H"),
    ("MinorOperatingSystemVersion", "<H"),
    ("MajorImageVersion", "<H"),
    ("MinorImageVersion", "<H"),
    ("MajorSubsystemVersion", "<H"),
    ("MinorSubsystemVersion", "<H"),
    ("Win32VersionValue", "<I"),
    ("SizeOfImage", "<I"),
    ("SizeOfHeaders", "<I"),
    ("Checksum", "<I"),
    ("Subsystem", "<H"),
    ("DllCharacteristics", "<H"),
]


def parse_pe(data: bytes) -> ParsedPE:
    """Parse headers, sections (with raw data), and the import table."""
    cur = _Cursor(data)
    if len(data) < 64 or data[:2] != DOS_MAGIC:
        raise PEFormatError("dos_header", 0, "missing MZ magic")
    (e_lfanew,) = cur.unpack("<I", 0x3C, "dos_header")
    if cur.bytes_at(e_lfanew, 4, "pe_signature") != PE_SIGNATURE:
        raise PEFormatError("pe_signature", e_lfanew, "missing PE\\0\\0 signature")

    pe = ParsedPE()
    coff_off = e_lfanew + 4
    (machine, n_sections, timestamp, _symtab, _nsyms, opt_size, characteristics) = cur.unpack(
        "<HHIIIHH", coff_off, "coff_header")
    pe.machine = machine
    fields = pe.header_fields
    fields["Machine"] = machine
    fields["NumberOfSections"] = n_sections
    fields["TimeDateStamp"] = timestamp
    fields["SizeOfOptionalHeader"] = opt_size
    fields["Characteristics"] = characteristics

    opt_off = coff_off + 20
    if opt_size < 2:
        raise PEFormatError("optional_header", opt_off, "optional header too small")
    (magic,) = cur.unpack("<H", opt_off, "optional_header")
    if magic == OPTIONAL_MAGIC_PE32:
        pe.is_pe32_plus = False
    elif magic == OPTIONAL_MAGIC_PE32_PLUS:
        pe.is_pe32_plus = True
    else:
        raise PEFormatError("optional_header", opt_off, f"unknown optional magic {magic:#x}")

    pos = opt_off + 2
    for name, fmt in _OPT_COMMON_HEAD:
        (value,) = cur.unpack(fmt, pos, "optional_header")
        fields[name] = value
        pos += struct.calcsize(fmt)
    if pe.is_pe32_plus:
        (fields["ImageBase"],) = cur.unpack("<Q", pos, "optional_header")
        pos += 8
    else:
        (_base_of_data,) = cur.unpack("<I", pos, "optional_header")
        pos += 4
        (fields["ImageBase"],) = cur.unpack("<I", pos, "optional_header")
        pos += 4
    for name, fmt in _OPT_TAIL:
        (value,) = cur.unpack(fmt, pos, "optional_header")
        fields[name] = value
        pos += struct.calcsize(fmt)
    size_fmt = "<Q" if pe.is_pe32_plus else "<I"
    for name in ("SizeOfStackReserve", "SizeOfStackCommit",
                 "SizeOfHeapReserve", "SizeOfHeapCommit"):
        (fields[name],) = cur.unpack(size_fmt, pos, "optional_header")
        pos += struct.calcsize(size_fmt)
    (_loader_flags,) = cur.unpack("<I", pos, "optional_header")
    pos += 4
    (n_rva,) = cur.unpack("<I", pos, "optional_header")
    fields["NumberOfRvaAndSizes"] = n_rva
    pos += 4

    directories = []
    for i in range(n_rva):
        if pos + 8 > opt_off + opt_size:
            raise PEFormatError("data_directories", pos, "directory table overruns optional header")
        va, size = cur.unpack("<II", pos, "data_directories")
        directories.append((va, size))
        pos += 8

    section_off = opt_off + opt_size
    for i in range(n_sections):
        rec = cur.bytes_at(section_off + 40 * i, 40, "section_table")
        raw_name = rec[:8].rstrip(b"\x00")
        vsize, vaddr, rsize, roff = struct.unpack_from("<IIII", rec, 8)
        (chars,) = struct.unpack_from("<I", rec, 36)
        if rsize and roff + rsize > len(data):
            raise PEFormatError("section_table", section_off + 40 * i,
                                f"section {raw_name!r} raw data runs past end of file")
        pe.sections.append(Section(
            name=raw_name.decode("latin-1"),
            virtual_size=vsize,
            virtual_address=vaddr,
            raw_size=rsize,
            raw_offset=roff,
            characteristics=chars,
            data=data[roff : roff + rsize] if rsize else b"",
        ))

    entropies = [shannon_entropy(s.data) for s in pe.sections if s.raw_size > 0]
    fields["MeanSectionEntropy"] = float(np.mean(entropies)) if entropies else 0.0
    fields["MaxSectionEntropy"] = float(np.max(entropies)) if entropies else 0.0

    if len(directories) > 1 and directories[1][0]:
        _parse_imports(cur, pe, directories[1][0])
    return pe


def _rva_to_offset(pe: ParsedPE, rva, structure):
    for s in pe.sections:
        span = max(s.virtual_size, s.raw_size)
        if s.virtual_address <= rva < s.virtual_address + span:
            return s.raw_offset + (rva - s.virtual_address)
    # headers are mapped 1:1 below the first section
    if rva < pe.header_fields.get("SizeOfHeaders", 0):
        return rva
    raise PEFormatError(structure, rva, f"RVA {rva:#x} not covered by any section")


def _parse_imports(cur, pe: ParsedPE, table_rva):
    desc_off = _rva_to_offset(pe, table_rva, "import_table")
    thunk_fmt, thunk_size = ("<Q", 8) if pe.is_pe32_plus else ("<I", 4)
    ordinal_bit = 1 << (63 if pe.is_pe32_plus else 31)
    for index in range(4096):  # descriptor count guard against cyclic tables
        off = desc_off + 20 * index
        lookup_rva, _ts, _fwd, name_rva, thunk_rva = cur.unpack("<IIIII", off, "import_table")
        if lookup_rva == 0 and name_rva == 0 and thunk_rva == 0:
            return
        dll = cur.cstring(_rva_to_offset(pe, name_rva, "import_table"), "import_table")
        entries_rva = lookup_rva or thunk_rva
        entry_off = _rva_to_offset(pe, entries_rva, "import_thunks")
        for j in range(65536):
            (entry,) = cur.unpack(thunk_fmt, entry_off + thunk_size * j, "import_thunks")
            if entry == 0:
                break
            if entry & ordinal_bit:
                pe.imports.append((dll, f"ord{entry & 0xFFFF}"))
            else:
                name_off = _rva_to_offset(pe, (entry & 0x7FFFFFFF) + 2, "import_thunks")
                pe.imports.append((dll, cur.cstring(name_off, "import_thunks")))
    raise PEFormatError("import_table", desc_off, "unterminated import descriptor table")
