"""Manifest file handling: strict parsing, defaults, multi-document files."""

import json

import pytest

from kupenstack import load_documents
from kupenstack.errors import ManifestParseError, ValidationFailedError
from kupenstack.manifest import load_documents_collecting

VALID_IMAGE = """
apiVersion: kupenstack.io/v1alpha1
kind: Image
metadata:
  name: cirros
  namespace: default
spec:
  sourceURI: http://images.local/cirros.qcow2
  diskFormat: qcow2
"""


def test_single_document():
    objs = load_documents(VALID_IMAGE)
    assert len(objs) == 1
    img = objs[0]
    assert img.kind == "Image"
    assert img.spec.container_format == "bare"   # default filled at parse time


def test_multi_document_file():
    text = VALID_IMAGE + "---\n" + VALID_IMAGE.replace("cirros", "ubuntu")
    objs = load_documents(text)
    assert [o.meta.name for o in objs] == ["cirros", "ubuntu"]


def test_json_accepted():
    doc = {"apiVersion": "kupenstack.io/v1alpha1", "kind": "Network",
           "metadata": {"name": "n1", "namespace": "default"},
           "spec": {"shared": True}}
    objs = load_documents(json.dumps(doc))
    assert objs[0].spec.shared is True


def test_unknown_spec_field_is_validation_error():
    text = VALID_IMAGE + "  flavour: large\n"
    with pytest.raises(ValidationFailedError) as err:
        load_documents(text)
    assert any(v.path == "Image.spec.flavour" and v.message == "unknown field"
               for v in err.value.violations)


def test_unknown_top_level_field_is_validation_error():
    text = VALID_IMAGE + "extras: {}\n"
    with pytest.raises(ValidationFailedError, match="unknown field"):
        load_documents(text)


def test_status_never_read_from_files():
    text = VALID_IMAGE + "status:\n  phase: Active\n  imageID: img-9\n"
    objs = load_documents(text)
    assert objs[0].status.image_id is None
    assert objs[0].status.phase == "Pending"


def test_server_managed_metadata_rejected():
    text = VALID_IMAGE.replace("  namespace: default",
                               "  namespace: default\n  uid: u-000009")
    with pytest.raises(ValidationFailedError, match="server-managed"):
        load_documents(text)


def test_missing_kind_is_parse_error():
    with pytest.raises(ManifestParseError, match="apiVersion and kind"):
        load_documents("apiVersion: kupenstack.io/v1alpha1\nmetadata: {name: x}\n")


def test_wrong_api_version_is_validation_error():
    with pytest.raises(ValidationFailedError, match="unsupported"):
        load_documents(VALID_IMAGE.replace("v1alpha1", "v9"))


def test_collecting_keeps_good_documents():
    text = (VALID_IMAGE + "---\n" + VALID_IMAGE.replace("cirros", "ubuntu")
            + "  bogus: 1\n")
    objs, parse_errors, validation_errors = load_documents_collecting(text)
    assert [o.meta.name for o in objs] == ["cirros"]
    assert parse_errors == []
    assert len(validation_errors) == 1


def test_yaml_syntax_error_carries_location():
    with pytest.raises(ManifestParseError, match="YAML syntax error"):
        load_documents("apiVersion: [unclosed\nkind: Image")


def test_empty_documents_skipped():
    assert load_documents("---\n---\n" + VALID_IMAGE) != []
