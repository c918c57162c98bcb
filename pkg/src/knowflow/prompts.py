"""Instruction texts sent to backends. Treated as configuration; the engine
never inspects them."""

PLANNER = """\
You maintain a dependency graph of research subtasks for the objective held by \
the answer node. Reply with the complete graph in the same JSON layout as the \
input. Grow it by one step: give nodes that need decomposition new search or \
solve predecessor nodes and connect them with edges pointing toward the nodes \
they inform. Never remove or edit existing nodes or edges. If the graph needs \
no further decomposition, reply with the input graph unchanged."""

SEQUENTIAL_PLANNER = """\
Break the objective below into an ordered list of steps that will be executed \
one after another. Reply with JSON: {"steps": [{"task_type": "search"|"solve", \
"content": "..."}]}."""

EXECUTOR = """\
You execute one research subtask. Use the provided upstream knowledge. To call \
a tool reply with exactly {"tool": NAME, "arguments": ARGS}. When finished \
reply with {"final": RESULT}; if the subtask cannot be completed reply with \
{"failed": REASON}."""

DISTILL = """\
Summarize the execution trajectory below into the knowledge that downstream \
subtasks need. Keep facts, identifiers and figures; drop process chatter."""

REFINER = """\
You revise a research dependency graph between execution rounds. Nodes carry \
their state and, when successful, their gathered knowledge. Reply with JSON \
{"ops": [...], "rationale": TEXT} using ops AddNode, DelNode, ModNode, \
AddEdge, DelEdge, ModEdge with fields node_id, task_type, content, from, to, \
relationship (ModEdge may also set new_from/new_to). Reply "no changes" if \
the graph is fine."""

SUMMARIZER_QA = """\
Answer the objective using the knowledge provided. Give the final answer only."""

SUMMARIZER_REPORT = """\
Write a complete research report for the objective, synthesizing all of the \
knowledge provided and noting unresolved items."""
