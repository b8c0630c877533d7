//! Three-step generation prompts and the simple-QA scoring prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conversation::{Strategy, Turn};
use crate::error::{Error, Result};

pub const STEP_MARKERS: [&str; 3] = [
    "Step 1: Comprehension Synthesis:",
    "Step 2: Associative Expansion:",
    "Step 3: Conclusion:",
];

/// Prompt families understood by [`build_prompt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Ent,
    Deps,
    Noi,
    Para,
    Int,
    PplQa,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Ent => "ent",
            PromptKind::Deps => "deps",
            PromptKind::Noi => "noi",
            PromptKind::Para => "para",
            PromptKind::Int => "int",
            PromptKind::PplQa => "ppl-qa",
        }
    }

    pub fn is_three_step(self) -> bool {
        self != PromptKind::PplQa
    }

    pub fn for_strategy(strategy: Strategy) -> Result<Self> {
        match strategy {
            Strategy::Ent => Ok(PromptKind::Ent),
            Strategy::Noi => Ok(PromptKind::Noi),
            Strategy::Para => Ok(PromptKind::Para),
            Strategy::Int => Ok(PromptKind::Int),
            other => Err(Error::UnsupportedStrategy(other.name().to_string())),
        }
    }

    /// First sentence of the task overview; identifies the prompt family.
    pub fn task_line(self) -> &'static str {
        match self {
            PromptKind::Ent => ENT_TASK,
            PromptKind::Deps => DEPS_TASK,
            PromptKind::Noi => NOI_TASK,
            PromptKind::Para => PARA_TASK,
            PromptKind::Int => INT_TASK,
            PromptKind::PplQa => PPL_TASK,
        }
    }

    pub const ALL: [PromptKind; 6] = [
        PromptKind::Ent,
        PromptKind::Deps,
        PromptKind::Noi,
        PromptKind::Para,
        PromptKind::Int,
        PromptKind::PplQa,
    ];
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnsupportedStrategy(s.to_string()))
    }
}

const ENT_TASK: &str = "Your task is to replace entities in the current conversation context while keeping the expressions as similar as possible to the original.";
const DEPS_TASK: &str = "Your task is to analyze a given conversation and identify the turns that are necessary for understanding the current search intent.";
const NOI_TASK: &str = "Your task is to introduce a noisy turn (one query and one response) into an existing conversation.";
const PARA_TASK: &str = "Your task is to paraphrase the provided conversation while preserving the original intent and meaning.";
const INT_TASK: &str = "Your task is to modify the current conversation by shifting its search intent.";
const PPL_TASK: &str = "I'm going to provide you with a conversation context and a current query.";

const ENT_TEMPLATE: &str = r#"Task Overview:

Your task is to replace entities in the current conversation context while keeping the expressions as similar as possible to the original. This involves identifying key entities, replacing them with suitable alternatives, and ensuring the conversation remains coherent. Use the following structured approach:

Example to Illustrate the Process (Demonstration):

Original Conversation:

Query1: "How long is the Golden Gate Bridge?"

Response1: "The Golden Gate Bridge is about 1.7 miles long."

Query2: "When was it opened to the public?"

Response2: "It was opened in May 1937."

Step 1: Comprehension Synthesis (Identify key entities in the conversation)

Output: Key Entities - Golden Gate Bridge, 1.7 miles, May 1937.

Step 2: Associative Expansion (Find suitable replacements for the identified entities)

Output: Brooklyn Bridge, 1.1 miles, December 1883.

Step 3: Conclusion (Reconstruct the conversation with new entities)

Entity-replaced Conversation:

Query1: "How long is the Brooklyn Bridge?"

Response1: "The Brooklyn Bridge is about 1.1 miles long."

Query2: "When was it opened to the public?"

Response2: "It was opened in December 1883."

Now, it's your turn. Please replace entities in the following conversation using the same process:

Original Conversation:

{conversation}

Step 1: Comprehension Synthesis:

[Identify entities of the conversation]

Step 2: Associative Expansion:

[Find suitable replacements for the identified entities]

Step 3: Conclusion:

[Reconstruct the conversation with new entities based on the outputs of the last two steps]

"#;

const DEPS_TEMPLATE: &str = r#"Task Overview:

Your task is to analyze a given conversation and identify the turns that are necessary for understanding the current search intent. Each turn includes one query and one response. Follow this structured approach:


Example to Illustrate the Process (Demonstration):

Original Conversation Context:

Turn1:

Query1: "What are the main attractions in Paris?"

Response1: "The Eiffel Tower and the Louvre are among the top attractions."

Turn2:

Query2: "Is the Louvre open on Sundays?"

Response2: "Yes, it's open from 9 AM to 6 PM."

Current Search Intent (New Query):

Query3: "How can I get tickets to the Louvre?"

Step 1: Comprehension Synthesis (Identify key themes and intents)

Output: Theme - Paris attractions; Intent - Acquiring information about attractions and related logistics.

Step 2: Associative Expansion (Evaluate the importance of each turn in relation to the current intent)

Output: Turn1: General information about attractions; not directly relevant to ticket acquisition. Turn2: Specific information about the Louvre; more relevant to planning a visit, potentially linked to ticketing information.

Step 3: Conclusion (Select turns crucial for the current intent)

Necessary Turns:

Turn2.

Now, it's your turn. Please identify the necessary turns in the following conversation using the same process:

Original Conversation:

{conversation}

Step 1: Comprehension Synthesis:

[Identify key themes and intents of the conversation]

Step 2: Associative Expansion:

[Evaluate the importance of each turn in relation to the current intent]

Step 3: Conclusion:

[Select turns crucial for the current intent based on the outputs of the last two steps]

"#;

const NOI_TEMPLATE: &str = r#"Task Overview:

Your task is to introduce a noisy turn (one query and one response) into an existing conversation. This turn should be relevant to the main background of the original conversation but introduce a new, slightly divergent element. Use the following structured approach:


Example to Illustrate the Process (Demonstration):

Original Conversation:

Query1: "Can you tell me about the history of the Sydney Opera House?"

Response1: "Certainly, it was designed by Jørn Utzon and opened in 1973."

Query2: "Is it true that Utzon faced challenges during its construction?"

Response2: "Yes, there were significant design and financial challenges that led to his resignation."

Step 1: Comprehension Synthesis (Identify key themes and intents)

Output: Theme - Sydney Opera House's history; Intent - Learning about design, construction challenges, and historical events.

Step 2: Associative Expansion (Generate a related but distinct element)

Output: Exploring Utzon's architectural style or other famous works.

Step 3: Conclusion (Introduce the new turn)

Noisy Turn:

Query: "Apart from the Sydney Opera House, did Utzon design other notable buildings?"

Response: "Yes, he also designed the Bagsværd Church in Denmark, known for its unique roof structure."

Now, it's your turn. Please introduce a noisy turn into the following conversation using the same process:

Original Conversation:

{conversation}

Step 1: Comprehension Synthesis:

[Identify key themes and intents of the conversation]

Step 2: Associative Expansion:

[Generate a related but distinct element of existing ones]

Step 3: Conclusion:

[Generate a noisy turn based on the outputs of the last two steps]

"#;

const PARA_TEMPLATE: &str = r#"Task Overview:

Your task is to paraphrase the provided conversation while preserving the original intent and meaning. Each turn in the conversation, including queries and responses, should be paraphrased thoughtfully.


Example to Illustrate the Process (Demonstration):

Original Conversation:

Query1: "What time does the train leave?"

Response1: "The train leaves at 6 PM."

Query2: "Do I need to buy a ticket in advance?"

Response2: "Yes, you need to purchase your ticket early."

Query3: "How early should I arrive at the station?"


Step 1: Comprehension Synthesis (Identify key themes and intents)

Output: Theme - Travel logistics; Intent - Acquiring information about train schedules, ticketing, and station arrival time.


Step 2: Associative Expansion (Generate alternative expressions based on existing ones)

Output: Train schedule -> Queries about departure times
Ticketing -> Questions about ticket purchase requirements

Step 3: Conclusion (Paraphrase the conversation based on outputs of last two steps)

Paraphrased Conversation:

Query1: "What hour is the train scheduled to depart?"

Response1: "The train's departure is set for 18:00."

Query2: "Should I purchase a ticket beforehand?"

Response2: "It‘s recommended to get ticket in advance."

Query3: "What‘s the suggested arrival time at station?"

Now, it's your turn. Please paraphrase the following conversation using the same process:

Original Conversation:

{conversation}

Step 1: Comprehension Synthesis:

[Identify key themes and intents of the conversation]

Step 2: Associative Expansion:

[Generate alternative expressions based on existing ones]

Step 3: Conclusion:

[Paraphrase the conversation based on outputs of the last two steps]

"#;

const INT_TEMPLATE: &str = r#"Task Overview:

Your task is to modify the current conversation by shifting its search intent. The new conversation should retain similar expressions to the original but embody a distinctly different intent. Follow this structured approach:


Example to Illustrate the Process (Demonstration):

Query1: "Can you recommend some good Italian restaurants in New York City?"

Response1: "Sure, one popular option is L'Artusi in the West Village."

Query2: "Do they offer vegetarian dishes?"

Response2: "Yes, they have a variety of vegetarian options."

Step 1: Comprehension Synthesis (Identify key themes and intents)

Output: Theme - Italian restaurants; Intent - Seeking recommendations in New York City.


Step 2: Associative Expansion (Choose a distinctly different intent)

Output: New Intent - Inquiring about Italian cooking classes in New York City.

Step 3: Conclusion (Reconstruct the conversation with the new intent)

Intent-Shifted Conversation:

Query1: "Can you suggest some places to learn Italian cooking in New York City?"

Response1: "Certainly, one well-known place is the Culinary Institute in Lower Manhattan."

Query2: "Do they offer classes for beginners?"

Response2: "Yes, they have a variety of courses for beginners."

Now, it's your turn. Please shift the intent of the following conversation using the same process:

Original Conversation:

{conversation}

Step 1: Comprehension Synthesis:

[Identify key themes and intents of the conversation]

Step 2: Associative Expansion:

[Shift the intent based on existing ones]

Step 3: Conclusion:

[Shift the conversation's intent based on the outputs of the last two steps]

"#;

const PPL_TEMPLATE: &str = r#"Task Overview:

I'm going to provide you with a conversation context and a current query. Your task is to answer the current query based on the information of the context:


Example to Illustrate the Process (Demonstration):

Conversation Context:

Query1: Can you recommend an Italian restaurant for me in New York City?

Response1: Giovanni's Veggie Delight is a popular Italian restaurant in NYC.

Query2: What's the weather like in New York today?

Response2: It's currently sunny and warm in New York.

Current Query:

Great, does Giovanni's have outdoor seating?

Response:

Yes, they have a beautiful patio area.

Now, it's your turn. Please answer the following conversation:

Conversation Context:

{context}

Current Query:

{query}

Response:

"#;

/// `Query<i>: "..."` / `Response<i>: "..."` lines separated by blank lines.
pub fn render_turns(turns: &[Turn]) -> String {
    let mut blocks = Vec::new();
    for t in turns {
        blocks.push(format!("Query{}: \"{}\"", t.index, t.query));
        if let Some(r) = &t.response {
            blocks.push(format!("Response{}: \"{}\"", t.index, r));
        }
    }
    blocks.join("\n\n")
}

/// Context turns in `Turn<k>:` blocks followed by the current-query section.
pub fn render_dependency_input(turns: &[Turn]) -> String {
    let (current, history) = turns.split_last().expect("at least one turn");
    let mut blocks = Vec::new();
    for t in history {
        blocks.push(format!("Turn{}:", t.index));
        blocks.push(format!("Query{}: \"{}\"", t.index, t.query));
        if let Some(r) = &t.response {
            blocks.push(format!("Response{}: \"{}\"", t.index, r));
        }
    }
    blocks.push("Current Search Intent (New Query):".to_string());
    blocks.push(format!("Query{}: \"{}\"", current.index, current.query));
    blocks.join("\n\n")
}

fn render_context(turns: &[Turn]) -> String {
    let mut blocks = Vec::new();
    for t in turns {
        blocks.push(format!("Query{}: {}", t.index, t.query));
        if let Some(r) = &t.response {
            blocks.push(format!("Response{}: {}", t.index, r));
        }
    }
    blocks.join("\n\n")
}

/// Renders the prompt for `kind` over `turns`, whose last element is treated as
/// the current turn. For `ppl-qa` the prompt ends right where the answer to
/// the current query would begin.
pub fn build_prompt(kind: PromptKind, turns: &[Turn]) -> Result<String> {
    if turns.is_empty() {
        return Err(Error::ParseFailure("cannot prompt over an empty conversation".into()));
    }
    let prompt = match kind {
        PromptKind::Ent => ENT_TEMPLATE.replace("{conversation}", &render_turns(turns)),
        PromptKind::Noi => NOI_TEMPLATE.replace("{conversation}", &render_turns(turns)),
        PromptKind::Para => PARA_TEMPLATE.replace("{conversation}", &render_turns(turns)),
        PromptKind::Int => INT_TEMPLATE.replace("{conversation}", &render_turns(turns)),
        PromptKind::Deps => {
            DEPS_TEMPLATE.replace("{conversation}", &render_dependency_input(turns))
        }
        PromptKind::PplQa => {
            let (current, history) = turns.split_last().expect("non-empty");
            PPL_TEMPLATE
                .replace("{context}", &render_context(history))
                .replace("{query}", &current.query)
        }
    };
    Ok(prompt)
}

/// Builds a prompt from a strategy name as it appears on the command line.
pub fn build_prompt_named(name: &str, turns: &[Turn]) -> Result<String> {
    build_prompt(name.parse()?, turns)
}

/// The user-supplied region of a rendered three-step prompt: everything between
/// the last `Original Conversation:` heading and the first step marker.
pub fn extract_input_section(prompt: &str) -> Option<&str> {
    let head = "Original Conversation:\n\n";
    let start = prompt.rfind(head)? + head.len();
    let end = start + prompt[start..].find(STEP_MARKERS[0])?;
    Some(prompt[start..end].trim())
}
