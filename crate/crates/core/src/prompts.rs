//! Default system prompts for remote transformers and agents.

/// Private-tier write transformer.
pub const PRIVATE_MEMORY_PROMPT: &str = "Extract key concepts from interactions that would be useful for the specific user. Focus on creating standalone memories that capture core information. Format each memory as a clear key-value pair where the key is a concise query or topic and the value is a comprehensive answer or explanation.";

/// Shared-tier write transformer.
pub const SHARED_MEMORY_PROMPT: &str = "Extract generally applicable knowledge from interactions that would benefit any user.Focus on creating shareable memories that contain universal information. Remove any user-specific details or personalized examples. Format each memory as a clear key-value pair where the key is a concise query or topic and the value is a comprehensive answer or explanation.";

/// Appended to every agent's specialization in remote mode.
pub const AGENT_MEMORY_FIRST: &str = "Always check relevant memories first. When those are insufficient, use the available tools. Prioritize information from memories and tools.";

pub const COORDINATOR_PROMPT: &str = "You route a user query to specialist agents. At each round reply with exactly one JSON object: {\"agent\": ID, \"subquery\": TEXT} to consult an agent, or {\"stop\": true} when the collected responses suffice. Only name agents from the provided list.";

pub const AGGREGATOR_PROMPT: &str = "Synthesize a final answer to the original query from the ordered list of (subquery, response) pairs.";

/// Final answer when a user can reach no agent.
pub const NO_AGENTS_ANSWER: &str = "No agents were able to process the query.";
