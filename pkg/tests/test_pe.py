"""Parser checks against fixtures produced by the repo's own PE writer."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from imad.features import HEADER_SCHEMA, header_features, import_tokens_from_pe
from imad.pe import PEFormatError, parse_pe, shannon_entropy

from pe_builder import build_pe


@pytest.fixture(scope="module")
def fixture_manifest():
    """A PE with fully known ground truth, built field by field."""
    header = {
        "Subsystem": 2,
        "MajorOperatingSystemVersion": 10,
        "MajorLinkerVersion": 14,
        "TimeDateStamp": 0x60000000,
        "Checksum": 0x1234,
    }
    sections = [
        (".text", bytes(range(256)) * 2),   # every byte value twice: entropy 8
        (".data", b"\x00" * 512),           # constant: entropy 0 (exact fill)
        (".rsrc", b"resource-data" * 10),
    ]
    imports = {
        "KERNEL32.dll": ["WriteFile", "ReadFile", "Sleep"],
        "USER32.dll": ["MessageBoxA"],
    }
    return {
        "bytes": build_pe(sections=sections, imports=imports, header=header),
        "header": header,
        "n_sections": 4,  # three declared plus the synthesized import section
        "import_pairs": [
            ("KERNEL32.dll", "WriteFile"), ("KERNEL32.dll", "ReadFile"),
            ("KERNEL32.dll", "Sleep"), ("USER32.dll", "MessageBoxA"),
        ],
        "import_tokens": ["kernel32.dll", "WriteFile", "ReadFile", "Sleep",
                          "user32.dll", "MessageBoxA"],
    }


class TestParsing:
    def test_fixture_headers_match_manifest(self, fixture_manifest):
        pe = parse_pe(fixture_manifest["bytes"])
        for field, expected in fixture_manifest["header"].items():
            assert pe.header_fields[field] == expected, field
        assert pe.header_fields["NumberOfSections"] == fixture_manifest["n_sections"]
        assert not pe.is_pe32_plus

    def test_fixture_imports_match_manifest(self, fixture_manifest):
        pe = parse_pe(fixture_manifest["bytes"])
        assert pe.imports == fixture_manifest["import_pairs"]
        assert import_tokens_from_pe(pe) == fixture_manifest["import_tokens"]

    def test_fixture_header_vector_slots(self, fixture_manifest):
        vec = header_features(fixture_manifest["bytes"])
        assert vec[HEADER_SCHEMA.index("Subsystem")] == 2.0
        assert vec[HEADER_SCHEMA.index("MajorOperatingSystemVersion")] == 10.0
        assert vec[HEADER_SCHEMA.index("NumberOfSections")] == 4.0
        assert vec[HEADER_SCHEMA.index("Checksum")] == float(0x1234)

    def test_section_entropies(self, fixture_manifest):
        pe = parse_pe(fixture_manifest["bytes"])
        by_name = {s.name: s for s in pe.sections}
        assert shannon_entropy(by_name[".text"].data) == pytest.approx(8.0)
        assert shannon_entropy(by_name[".data"].data) == 0.0
        assert pe.header_fields["MaxSectionEntropy"] == pytest.approx(8.0)
        entropies = [shannon_entropy(s.data) for s in pe.sections if s.raw_size]
        assert pe.header_fields["MeanSectionEntropy"] == pytest.approx(np.mean(entropies))

    def test_pe32_plus(self):
        blob = build_pe(imports={"ntdll.dll": ["NtClose", "NtOpenFile"]},
                        pe32_plus=True)
        pe = parse_pe(blob)
        assert pe.is_pe32_plus
        assert pe.header_fields["ImageBase"] == 0x140000000
        assert pe.imports == [("ntdll.dll", "NtClose"), ("ntdll.dll", "NtOpenFile")]

    def test_no_import_table(self):
        pe = parse_pe(build_pe())
        assert pe.imports == []


class TestMalformedInputs:
    def test_missing_mz(self):
        with pytest.raises(PEFormatError) as info:
            parse_pe(b"ZZ" + b"\x00" * 100)
        assert info.value.structure == "dos_header"
        assert info.value.offset == 0

    def test_too_short(self):
        with pytest.raises(PEFormatError):
            parse_pe(b"MZ")

    def test_bad_e_lfanew(self):
        blob = bytearray(build_pe())
        struct.pack_into("<I", blob, 0x3C, 0xFFFFF0)
        with pytest.raises(PEFormatError) as info:
            parse_pe(bytes(blob))
        assert info.value.structure == "pe_signature"

    def test_bad_signature(self):
        blob = bytearray(build_pe())
        blob[0x80:0x84] = b"XX\x00\x00"
        with pytest.raises(PEFormatError, match="signature"):
            parse_pe(bytes(blob))

    def test_unknown_optional_magic(self):
        blob = bytearray(build_pe())
        struct.pack_into("<H", blob, 0x80 + 4 + 20, 0x999)
        with pytest.raises(PEFormatError) as info:
            parse_pe(bytes(blob))
        assert info.value.structure == "optional_header"
        assert "0x999" in str(info.value)

    def test_section_running_past_eof(self):
        blob = build_pe(sections=[(".text", b"\x90" * 64)])
        with pytest.raises(PEFormatError) as info:
            parse_pe(blob[:-70])
        assert info.value.structure == "section_table"

    def test_import_rva_outside_sections(self):
        blob = bytearray(build_pe(imports={"a.dll": ["f"]}))
        pe = parse_pe(bytes(blob))
        # find the import directory entry and corrupt its RVA
        opt_off = 0x80 + 4 + 20
        dir_off = opt_off + 96 + 8  # PE32 fixed fields, then directory[1]
        struct.pack_into("<I", blob, dir_off, 0x00900000)
        with pytest.raises(PEFormatError) as info:
            parse_pe(bytes(blob))
        assert info.value.structure in ("import_table", "import_thunks")
        assert info.value.offset == 0x00900000

    def test_error_message_carries_structure_and_offset(self):
        try:
            parse_pe(b"\x00" * 128)
        except PEFormatError as exc:
            assert "dos_header" in str(exc)
            assert "0x0" in str(exc)
        else:
            pytest.fail("expected PEFormatError")
