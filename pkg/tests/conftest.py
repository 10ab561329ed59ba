import numpy as np
import pytest

from popcal.corpus import OccurrenceIndex
from popcal.data import DatasetId, KnowledgeTriple, make_qa_record


def make_triple(i, dataset=DatasetId.MOVIES, subject_qid=None, object_qid=None):
    t = KnowledgeTriple(
        dataset_id=dataset,
        subject=f"Subject {i}",
        relation="directed by",
        object=f"Object {i}",
        subject_entity=subject_qid,
        object_entity=object_qid,
        question=f"Who is the director of the movie Subject {i}?",
    )
    return t


def make_filter_fixture(cap=3):
    """20 aligned records: 3 empty generations, 2 unresolved generated
    entities, 1 over-cap entity, 14 clean survivors.

    Returns (records, index, cap). Doc frequencies are set directly: the
    over-cap entity sits in cap+1 documents, everything else in one.
    """
    postings = {}
    records = []
    total_docs = cap + 2
    for i in range(20):
        s, o, g = f"S{i}", f"O{i}", f"G{i}"
        for e in (s, o):
            postings[e] = np.array([i % total_docs], dtype=np.uint32)
        answer = f"Object {i}"
        token_probs = (0.9, 0.8)
        generated = g
        if i in (0, 1, 2):  # empty generations
            answer, token_probs, generated = "", (), None
        elif i in (5, 6):  # unresolved: no entity id came back
            generated = None
        if generated is not None:
            postings[g] = np.array([i % total_docs], dtype=np.uint32)
        if i == 10:  # over the document-frequency cap
            postings[g] = np.arange(cap + 1, dtype=np.uint32)
        triple = make_triple(i, subject_qid=s, object_qid=o)
        records.append(make_qa_record(triple, answer, token_probs, generated))
    index = OccurrenceIndex(total_docs, postings)
    return records, index, cap


@pytest.fixture
def filter_fixture():
    return make_filter_fixture()
