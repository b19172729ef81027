use actlens::Category;

/// A failure with the category that decides the exit code.
#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
    /// Help or version text requested; printed to stdout with exit 0.
    help: bool,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            category: Category::Usage,
            message: message.into(),
            help: false,
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            category: Category::Data,
            message: message.into(),
            help: false,
        }
    }

    pub fn help(text: impl Into<String>) -> Self {
        Self {
            help: true,
            ..Self::usage(text)
        }
    }

    pub fn is_help(&self) -> bool {
        self.help
    }

    /// Prefixes the message with the file it concerns.
    pub fn context(mut self, path: &std::path::Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }

    pub fn exit_code(&self) -> u8 {
        match self.category {
            Category::Usage => 2,
            Category::Data => 3,
            Category::Numeric => 4,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.category {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Numeric => "numeric",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "error[{}]: {}",
            self.label(),
            self.message.replace('\n', " ")
        )
    }
}

impl From<actlens::Error> for CliError {
    fn from(e: actlens::Error) -> Self {
        Self {
            category: e.category(),
            message: e.to_string(),
            help: false,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}
