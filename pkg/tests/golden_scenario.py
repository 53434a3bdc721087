"""Golden multi-hop QA scenario used by the replay tests.

One complete optimization episode over a single retrieval question whose
verification step hallucinates: the structure edit grows the sketch from 4
steps (1 tool) to 6 steps (2 tools), backpropagation pins the blame on the
verification step, and its prompt gets rewritten. All meta texts are fixture
constants; the scripted backend below plays the episode deterministically so
it can be recorded once and replayed byte-for-byte.
"""

from __future__ import annotations

import json

from flowtune.backend import ChatRequest, Purpose
from flowtune.model import (
    LLM_EXECUTOR,
    TOOL_EXECUTOR,
    ExecutorSpec,
    StepSpec,
    WorkflowState,
)
from flowtune.evaluation import Sample
from flowtune.tools import CorpusDoc

QUESTION = ("The 1905-1904 college basketball team lead by G.W. Leach represented "
            "a university founded in what year?")
GROUND_TRUTH = "1846"
WRONG_PREDICTION = "1865"
SAMPLE = Sample(id="golden-1", question=QUESTION, answer=GROUND_TRUTH)

SEARCH_TOOL = "wikipedia_search_topk"

CORPUS = [
    CorpusDoc("bucknell", "Bucknell University",
              "Bucknell University is a private university in Lewisburg, Pennsylvania. "
              "Bucknell was founded in 1846 and enrolls students in arts and engineering."),
    CorpusDoc("bison-1905", "1905-06 Bucknell Bison men's basketball team",
              "The 1905-06 Bucknell Bison men's basketball team represented Bucknell "
              "University, with G.W. Leach serving as team captain during the season."),
    CorpusDoc("kentucky", "University of Kentucky",
              "The University of Kentucky is a public university in Lexington, founded "
              "in 1865 and known for its Wildcats athletic programs."),
]

# ---------------------------------------------------------------------------
# Executor prompts (the verification pair is the before/after fixture)
# ---------------------------------------------------------------------------

SEARCH_PROMPT = (
    "You perform a broad encyclopedia search for the entities mentioned in the "
    "question. Call the search tool with a focused query, then present the most "
    "relevant passages with clear labels."
)

EXTRACT_PROMPT = (
    "You extract the exact answer string requested by the question from the "
    "passages you are given. Output the answer concisely."
)

VERIFIER_PROMPT_BEFORE = (
    "You are given multiple candidate answers to a question, each supported by one "
    "or more passages and associated confidence indicators. Your task is to carefully "
    "verify the correctness and reliability of each candidate answer by cross-checking "
    "the supporting passages for consistency, factual accuracy, and strength of "
    "evidence. Consider any confidence indicators provided as part of your assessment. "
    "If some answers conflict, analyze the evidence to determine which answer is most "
    "trustworthy. If no answer is sufficiently supported, indicate that no reliable "
    "answer could be determined. Finally, rank the candidate answers from most to "
    "least reliable and provide a clear explanation for your ranking and the final "
    "selected answer."
)

VERIFIER_PROMPT_AFTER = (
    "You are given multiple candidate answers to a question, each supported by one "
    "or more passages and associated confidence indicators. Your task is to carefully "
    "verify the correctness and reliability of each candidate answer by cross-checking "
    "the supporting passages for consistency, factual accuracy, and strength of "
    "evidence. Consider any confidence indicators provided as part of your assessment. "
    "If some answers conflict, analyze the evidence to determine which answer is most "
    "trustworthy. To improve accuracy, explicitly check for discrepancies among "
    "candidate answers and, where possible, cross-reference with common knowledge or "
    "authoritative sources. When discrepancies or uncertainties arise, flag them "
    "clearly and retain multiple plausible candidates along with their confidence "
    "scores rather than selecting a definitive answer prematurely. If no answer is "
    "sufficiently supported or uncertainty remains high, indicate that no reliable "
    "answer could be determined. Finally, rank the candidate answers from most to "
    "least reliable and provide a clear explanation for your ranking and the final "
    "selected answer."
)

FINAL_PROMPT = (
    "You produce the final answer exactly as requested, with no commentary and no "
    "explanation. Output only the answer string."
)

DISAMBIG_PROMPT = (
    "You identify and confirm the primary entity the question is about, reasoning "
    "from the retrieved passages. Name the entity explicitly and note the attribute "
    "of interest so the next step can run a targeted search."
)

TARGETED_PROMPT = (
    "You run a targeted search for a specific attribute of an already-identified "
    "entity. Call the search tool with the entity name plus attribute keywords, then "
    "present the passages that state the attribute."
)

# ---------------------------------------------------------------------------
# Workflow states
# ---------------------------------------------------------------------------


def before_state() -> WorkflowState:
    executors = {e.name: e for e in (
        ExecutorSpec("WikipediaSearch", TOOL_EXECUTOR, "Broad encyclopedia search",
                     SEARCH_PROMPT, (SEARCH_TOOL,)),
        ExecutorSpec("AnswerExtraction", LLM_EXECUTOR, "Extract the answer string",
                     EXTRACT_PROMPT),
        ExecutorSpec("Verification", LLM_EXECUTOR, "Verify candidate answers",
                     VERIFIER_PROMPT_BEFORE),
        ExecutorSpec("FinalAnswer", LLM_EXECUTOR, "Emit the final answer",
                     FINAL_PROMPT),
    )}
    sketch = (
        StepSpec(1, "Wikipedia search", "WikipediaSearch", (SEARCH_TOOL,)),
        StepSpec(2, "Answer extraction", "AnswerExtraction"),
        StepSpec(3, "Verification", "Verification"),
        StepSpec(4, "Final answer", "FinalAnswer"),
    )
    return WorkflowState(sketch=sketch, executors=executors, revision=0)


# ---------------------------------------------------------------------------
# Forward-pass outputs
# ---------------------------------------------------------------------------

SEARCH_CALL = json.dumps({"tool": SEARCH_TOOL,
                          "arguments": {"query": "G.W. Leach 1905 basketball team", "k": 3}})

SEARCH_OUTPUT = (
    "Retrieved passages:\n"
    "Passage 1: The 1905-06 Bucknell Bison men's basketball team represented Bucknell "
    "University, with G.W. Leach serving as team captain.\n"
    "Passage 2: Early college basketball teams played short seasons against local clubs."
)

BEFORE_EXTRACT_OUTPUT = (
    "Candidate answer: 1865 (inferred founding year of the university associated "
    "with the team)"
)

BEFORE_VERIFY_OUTPUT = (
    "The candidate answer 1865 is consistent with the association considered most "
    "likely; accepting 1865 as the final candidate."
)

DISAMBIG_OUTPUT = (
    "Primary entity: Bucknell University. G.W. Leach captained the 1905-06 Bucknell "
    "Bison men's basketball team, so the university in question is Bucknell. "
    "Attribute of interest: founding year."
)

TARGETED_CALL = json.dumps({"tool": SEARCH_TOOL,
                            "arguments": {"query": "Bucknell University founding year", "k": 5}})

TARGETED_OUTPUT = (
    "Retrieved passages about Bucknell University:\n"
    "Passage 5: Bucknell was founded in 1846 and enrolls students in arts and "
    "engineering.\n"
    "The founding year is stated explicitly in Passage 5."
)

EXTRACT_OUTPUT = "1846"

VERIFY_OUTPUT = (
    "Step-by-step verification: the candidate answer is 1846. However, G.W. Leach is "
    "historically known as a coach of the Kentucky Wildcats, so the relevant "
    "institution is the University of Kentucky, founded in 1865. Rejecting the "
    "candidate 1846 and selecting 1865 as the verified founding year. "
    "Final verified answer: 1865."
)

FINAL_OUTPUT = "1865"

# ---------------------------------------------------------------------------
# Meta texts: workflow gradient, per-step gradients, plan, prompt update
# ---------------------------------------------------------------------------

WORKFLOW_GRADIENT = (
    "Modify the workflow to explicitly separate entity identification and attribute "
    "retrieval steps. After the initial broad Wikipedia search for the question "
    "context (Step 1), add a dedicated entity disambiguation step that confirms the "
    "relevant university by querying specifically for 'G.W. Leach 1904-1905 "
    "basketball team university' or similar, possibly with a retrieval-augmented LLM. "
    "Then, perform a targeted retrieval step to get founding year information about "
    "the identified university (e.g., a separate wikipedia_search_topk call with the "
    "university name and keywords like 'founding year'). Next, extract the founding "
    "year from these dedicated passages. Follow this with a verification step that "
    "cross-checks multiple passages and confidence scores to confirm the final "
    "answer. This division reduces ambiguity and error propagation. Additionally, "
    "consider merging answer extraction and verification into a single "
    "retrieval-augmented step to use external evidence rather than pure LLM "
    "reasoning. Allocate tool usage not only to initial retrieval but also to "
    "targeted retrieval steps for entity attributes. Finally, ensure that the final "
    "answer generation step formats the answer but does not perform reasoning, "
    "keeping responsibilities clear and modular."
)

GRADIENT_6 = (
    "The executor is correctly following the instruction to provide a concise, exact "
    "answer without any additional commentary or explanation, which aligns perfectly "
    "with the prompt requirements for the final step. This focused approach is "
    "beneficial as it avoids ambiguity and ensures the output format is clean and "
    "directly comparable to the ground truth. However, the key issue lies in the "
    "accuracy of the answer itself: the executor output '1865' does not match the "
    "ground truth year '1846'. This indicates a failure in retrieving or verifying "
    "the correct founding year of the university associated with the 1904-1905 "
    "college basketball team led by G.W. Leach. To improve, the executor needs to "
    "ensure the input answer provided to this step is accurate by cross-referencing "
    "reliable data sources or prior steps that confirm the founding year as 1846. "
    "Specifically, the executor's input should be corrected upstream, or if this "
    "step has any responsibility to verify or correct the answer, it should "
    "implement a validation mechanism. In summary, preserve the executor's strict "
    "adherence to output formatting and brevity, but improve the accuracy of the "
    "final answer by enhancing data retrieval or validation processes before this "
    "final step."
)

GRADIENT_5 = (
    "This step does an excellent job of clearly and thoroughly verifying and ranking "
    "the candidate answer, presenting a detailed logical reasoning process that "
    "identifies the University of Kentucky as the relevant institution and "
    "establishes 1865 as its founding year. The explicit stepwise breakdown, the "
    "consideration of historical context, and the ranking of candidate answers "
    "provide strong, well-structured support for downstream steps. The formatting is "
    "clear and consistent, making it easy for subsequent steps to extract and use "
    "the final verified answer. These aspects should be preserved as they ensure "
    "clarity, traceability, and well-supported conclusions. However, the main issue "
    "is the inaccuracy of the foundational data: the step concludes that 1865 is the "
    "correct founding year, but the ground truth is 1846. To improve downstream "
    "performance, this step needs to incorporate more robust verification "
    "mechanisms, such as cross-checking multiple authoritative sources or explicitly "
    "handling discrepancies between candidate answers and common knowledge. It "
    "should also consider whether alternative interpretations or predecessor "
    "institutions correspond to 1846, or whether the initial premise about the "
    "university identity or coach association might be incorrect. Including a "
    "mechanism to flag uncertainty or to retain multiple plausible candidates with "
    "their confidence scores could help prevent propagating incorrect definitive "
    "answers. In sum, preserve the clear reasoning and structured presentation, but "
    "improve the accuracy and validation process to ensure the final answer aligns "
    "with the correct ground truth."
)

GRADIENT_4 = (
    "This step correctly extracts and outputs a concise candidate answer string, "
    "'1846', which is clearly formatted and readily usable for downstream "
    "verification. The simplicity and directness of the output support the next "
    "step's ability to take the candidate answer and perform a detailed validation "
    "and ranking process. Preserving this clarity and exactness is important for "
    "traceability and ease of interpretation by subsequent steps. However, to "
    "improve downstream performance, this step should incorporate additional "
    "verification signals or confidence indicators alongside the candidate answer. "
    "For example, it could include a brief note or metadata referencing the "
    "source(s) from which '1846' was extracted or an initial confidence score, which "
    "would help the next step assess the reliability of the candidate answer more "
    "effectively. Moreover, given that the next step identifies '1846' as "
    "inconsistent with authoritative historical data, this step could be enhanced by "
    "performing preliminary cross-checks or highlighting uncertainty if conflicting "
    "data is detected. Including multiple candidate answers with associated "
    "confidence levels, or explicitly flagging potential discrepancies at this "
    "stage, would prevent propagating a potentially inaccurate definitive answer and "
    "provide richer information for downstream reasoning. In summary, retain the "
    "clear, exact answer extraction as is, but augment the output with verification "
    "context, confidence metrics, and/or candidate alternatives to enable more "
    "robust validation and improve final answer accuracy."
)

GRADIENT_3 = (
    "This step is performing well by retrieving and presenting a focused set of "
    "passages that are directly relevant to the entity 'Bucknell University' and its "
    "founding year, which is the key attribute of interest. The output is "
    "well-structured, showing the passage that contains the precise founding year "
    "'1846' with a clear reference. This clarity and specificity provide the next "
    "step with rich, targeted evidence to extract the exact answer string. To "
    "enhance downstream performance, this step could add preliminary verification "
    "or confidence signals about the attribute information present in the retrieved "
    "passages, highlight the passage containing the founding year explicitly, and "
    "provide multiple candidate founding years with provenance metadata if any "
    "ambiguity or conflicting data were detected. In summary, preserve the targeted "
    "retrieval and clean formatting, and augment the output with verification "
    "context, confidence indicators, and explicit provenance annotations."
)

GRADIENT_2 = (
    "This step is doing well by clearly identifying and verifying the primary entity "
    "relevant to the question, 'Bucknell University,' with explicit reasoning that "
    "links G.W. Leach and the 1905-1906 basketball team to that university. The "
    "output preserves the entity name consistently and provides a concise, focused "
    "explanation that supports the next step's targeted search. This clarity and "
    "precision in entity disambiguation should be preserved. To improve downstream "
    "performance, this step could add preliminary confidence indicators about the "
    "certainty of the identified entity, mention alternative entities that were "
    "considered and ruled out, and summarize the key attribute of interest (the "
    "founding year) alongside the entity so the next step can tailor its search "
    "queries. In summary, maintain the strong entity verification and consistent "
    "formatting while augmenting the output with confidence signals and the "
    "attribute of interest."
)

GRADIENT_1 = (
    "This step effectively retrieves relevant passages containing key information "
    "about the 1905-1906 college basketball team led by G.W. Leach, which supports "
    "the next step's entity disambiguation. The output includes a clear "
    "identification of the Bucknell Bison team with G.W. Leach as captain, and the "
    "labelled passages are easy to parse for later steps. To better support "
    "subsequent steps, this output could explicitly highlight the passage that links "
    "G.W. Leach to Bucknell University, add a short extracted fact snippet, and "
    "include preliminary confidence indicators about the retrieved passages or "
    "candidate entities. Overall, preserve the detailed, well-structured retrieval "
    "output while adding explicit relevance annotations and a concise fact "
    "extraction to improve downstream entity verification and answer extraction."
)

STEP_GRADIENTS = {1: GRADIENT_1, 2: GRADIENT_2, 3: GRADIENT_3,
                  4: GRADIENT_4, 5: GRADIENT_5, 6: GRADIENT_6}

PLAN_REASONING = (
    "The gradients repeatedly point at ambiguous entity resolution and at attribute "
    "lookups that piggyback on the initial broad search. The ideal workflow splits "
    "entity identification from attribute retrieval and gives the attribute lookup "
    "its own tool call, keeping extraction, verification, and final formatting as "
    "separate responsibilities."
)

UPDATED_PLAN = {
    "reasoning": PLAN_REASONING,
    "should_update": True,
    "updated_execution_plan": [
        {"step_id": 1, "description": "Wikipedia search", "tools": [SEARCH_TOOL],
         "executor_type": "reuse", "executor_name": "WikipediaSearch",
         "generation_guideline": ""},
        {"step_id": 2, "description": "Entity disambiguation", "tools": [],
         "executor_type": "new", "executor_name": "entity_disambiguation_v1",
         "generation_guideline": "Confirm the primary entity the question is about "
                                 "from the retrieved passages and name the attribute "
                                 "of interest for the targeted search."},
        {"step_id": 3, "description": "Targeted attribute retrieval", "tools": [SEARCH_TOOL],
         "executor_type": "new", "executor_name": "targeted_attribute_retrieval_v1",
         "generation_guideline": "Search specifically for the identified entity's "
                                 "attribute (e.g. founding year) and present the "
                                 "passages that state it."},
        {"step_id": 4, "description": "Answer extraction", "tools": [],
         "executor_type": "reuse", "executor_name": "AnswerExtraction",
         "generation_guideline": ""},
        {"step_id": 5, "description": "Verification", "tools": [],
         "executor_type": "reuse", "executor_name": "Verification",
         "generation_guideline": ""},
        {"step_id": 6, "description": "Final answer", "tools": [],
         "executor_type": "reuse", "executor_name": "FinalAnswer",
         "generation_guideline": ""},
    ],
}

INIT_REPLIES = {
    2: {"name": "EntityDisambiguation", "type": "LLMExecutor",
        "description": "Confirms the primary entity and the attribute of interest",
        "prompt": DISAMBIG_PROMPT},
    3: {"name": "TargetedAttributeRetrieval", "type": "ToolExecutor",
        "description": "Targeted search for one attribute of the identified entity",
        "prompt": TARGETED_PROMPT},
}

PROMPT_UPDATE_CHANGES = [
    "Added explicit discrepancy checks among candidate answers",
    "Required cross-referencing with common knowledge or authoritative sources",
    "Flag uncertainties and retain multiple plausible candidates with confidence scores",
    "Allow declaring that no reliable answer could be determined under high uncertainty",
]

EXECUTOR_PROMPTS = {
    "WikipediaSearch": SEARCH_PROMPT,
    "EntityDisambiguation": DISAMBIG_PROMPT,
    "TargetedAttributeRetrieval": TARGETED_PROMPT,
    "AnswerExtraction": EXTRACT_PROMPT,
    "Verification": VERIFIER_PROMPT_BEFORE,
    "FinalAnswer": FINAL_PROMPT,
}


def fenced(obj) -> str:
    return f"```json\n{json.dumps(obj)}\n```"


def _user(request: ChatRequest) -> str:
    for m in reversed(request.messages):
        if m.role == "user":
            return m.content
    return ""


def _system(request: ChatRequest) -> str:
    return request.messages[0].content if request.messages[0].role == "system" else ""


def make_script():
    """Scripted backend playing the whole episode, keyed only on request content."""

    def forward(request: ChatRequest) -> str:
        system = _system(request)
        user = _user(request)
        awaiting_tool_result = "Tool result for" in user
        if system.startswith(SEARCH_PROMPT):
            return SEARCH_OUTPUT if awaiting_tool_result else fenced(json.loads(SEARCH_CALL))
        if system.startswith(DISAMBIG_PROMPT):
            return DISAMBIG_OUTPUT
        if system.startswith(TARGETED_PROMPT):
            return TARGETED_OUTPUT if awaiting_tool_result else fenced(json.loads(TARGETED_CALL))
        if system.startswith(EXTRACT_PROMPT):
            return EXTRACT_OUTPUT if "Passage 5" in user else BEFORE_EXTRACT_OUTPUT
        if system.startswith(VERIFIER_PROMPT_BEFORE) or system.startswith(VERIFIER_PROMPT_AFTER):
            return VERIFY_OUTPUT if EXTRACT_OUTPUT in user.split("## Previous Step Output")[-1] \
                else BEFORE_VERIFY_OUTPUT
        if system.startswith(FINAL_PROMPT):
            return FINAL_OUTPUT
        raise AssertionError(f"unscripted forward executor: {system[:60]!r}")

    def grad_call(request: ChatRequest) -> str:
        user = _user(request)
        for step_id in range(1, 7):
            if f"## This Step (Step {step_id})" in user:
                return fenced({"text_gradient": STEP_GRADIENTS[step_id]})
        raise AssertionError("chain-rule request without a step header")

    def init_executor(request: ChatRequest) -> str:
        user = _user(request)
        for step_id, reply in INIT_REPLIES.items():
            if f"**Step ID**: {step_id}" in user:
                return fenced(reply)
        raise AssertionError("unexpected initialization request")

    def optim_call(request: ChatRequest) -> str:
        user = _user(request)
        for name, prompt in EXECUTOR_PROMPTS.items():
            if f"**Name**: {name}" in user:
                if name == "Verification":
                    return fenced({"updated_prompt": VERIFIER_PROMPT_AFTER,
                                   "changes_made": PROMPT_UPDATE_CHANGES,
                                   "reasoning": "Address the hallucinated verification."})
                return fenced({"updated_prompt": prompt,
                               "changes_made": [],
                               "reasoning": "No gradient criticism; prompt retained."})
        raise AssertionError("prompt update request for unknown executor")

    def script(request: ChatRequest) -> str:
        if request.purpose == Purpose.FORWARD:
            return forward(request)
        if request.purpose == Purpose.GRAD_WORKFLOW:
            return fenced({"reasoning": "Structural issues dominate; see gradient.",
                           "text_gradient": WORKFLOW_GRADIENT})
        if request.purpose == Purpose.OPTIM_WORKFLOW:
            return fenced(UPDATED_PLAN)
        if request.purpose == Purpose.INIT_EXECUTOR:
            return init_executor(request)
        if request.purpose == Purpose.GRAD_LOSS:
            return fenced({"text_gradient": GRADIENT_6})
        if request.purpose == Purpose.GRAD_CALL:
            return grad_call(request)
        if request.purpose == Purpose.OPTIM_CALL:
            return optim_call(request)
        raise AssertionError(f"unscripted purpose {request.purpose}")

    return script


def write_corpus(path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in CORPUS:
            f.write(json.dumps({"doc_id": doc.doc_id, "title": doc.title,
                                "body": doc.body}) + "\n")


def write_dataset(path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"id": SAMPLE.id, "question": SAMPLE.question,
                            "answer": SAMPLE.answer}) + "\n")
